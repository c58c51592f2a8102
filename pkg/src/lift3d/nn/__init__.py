"""Minimal tensor facility and the temporal convolutional lifting network."""

from .gradcheck import gradcheck_model, relative_error
from .layers import BatchNorm1d, Conv1d, Dropout, ReLU, conv1d_dilated_forward
from .serialize import load_model, read_model_file, save_model
from .tcn import FRAME_LADDER, TcnConfig, TcnModel, receptive_field
from .tensor import Tensor

__all__ = [
    "BatchNorm1d", "Conv1d", "Dropout", "ReLU", "conv1d_dilated_forward",
    "FRAME_LADDER", "TcnConfig", "TcnModel", "receptive_field", "Tensor",
    "gradcheck_model", "relative_error", "load_model", "read_model_file", "save_model",
]
