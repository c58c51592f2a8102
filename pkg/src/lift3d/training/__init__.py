"""Self-supervised training: input normalisation, losses, optimiser and loop."""

from .losses import LossReport, con_loss, loss_con, loss_tri, relative_arrays, total_loss, tri_loss
from .normalize import (
    OUTPUT_SCALE,
    back_projection_rays,
    decode_backward,
    decode_output,
    denormalize,
    encode_target,
    image_diagonal,
    normalize_coords,
    normalize_input,
)
from .optim import Adam, adam_step, lr_at_epoch
from .trainer import (
    PseudoLabels,
    TrainConfig,
    TrainResult,
    evaluate_loss,
    predict_coords,
    predict_dataset,
    prepare,
    train,
    triangulate_dataset,
    write_log,
)

__all__ = [
    "LossReport", "con_loss", "loss_con", "loss_tri", "relative_arrays", "total_loss", "tri_loss",
    "OUTPUT_SCALE", "back_projection_rays", "decode_backward", "decode_output", "denormalize",
    "encode_target", "image_diagonal", "normalize_coords", "normalize_input",
    "Adam", "adam_step", "lr_at_epoch",
    "PseudoLabels", "TrainConfig", "TrainResult", "evaluate_loss", "predict_coords",
    "predict_dataset", "prepare", "train", "triangulate_dataset", "write_log",
]
