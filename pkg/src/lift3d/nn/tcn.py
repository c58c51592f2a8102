"""Dilated temporal convolutional lifting network.

Layout for ``blocks >= 1``::

    expand:  conv(2N -> C, k, d=1) -> BN -> ReLU -> dropout
    block b: conv(C -> C, k, d=k**b) -> BN -> ReLU -> dropout
             -> conv1x1 -> BN -> ReLU -> dropout, plus the centre-cropped input
    head:    conv1x1(C -> 3N) with bias

giving a receptive field of ``k ** (blocks + 1)`` frames. ``blocks == 0`` is
the degenerate single-frame model: one 1x1 linear layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, NumericFailureError, SequenceTooShortError, StateError
from .layers import BatchNorm1d, Conv1d, Dropout, ReLU

FRAME_LADDER = (1, 27, 81, 243)


@dataclass(frozen=True)
class TcnConfig:
    num_joints: int = 17
    channels: int = 256
    blocks: int = 2
    kernel_width: int = 3
    dropout: float = 0.25
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.channels <= 0 or self.num_joints <= 0:
            raise ConfigError("channels and num_joints must be positive")
        if self.blocks < 0:
            raise ConfigError("blocks must be >= 0")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError("kernel_width must be a positive odd integer")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def in_features(self) -> int:
        return 2 * self.num_joints

    @property
    def out_features(self) -> int:
        return 3 * self.num_joints

    def dilations(self) -> list:
        return [self.kernel_width ** b for b in range(1, self.blocks + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TcnConfig":
        return cls(**d)

    @classmethod
    def for_frames(cls, frames: int, **kw) -> "TcnConfig":
        """Config for a receptive field in the 1/27/81/243 ladder.

        The single-frame variant keeps two residual blocks with 1-wide
        kernels so its depth matches the 27-frame model.
        """
        if frames == 1:
            return cls(blocks=kw.pop("blocks", 2), kernel_width=1, **kw)
        blocks = {27: 2, 81: 3, 243: 4}.get(frames)
        if blocks is None:
            raise ConfigError(f"unsupported receptive field {frames}; choose from {FRAME_LADDER}")
        return cls(blocks=blocks, kernel_width=3, **kw)


def receptive_field(config: TcnConfig) -> int:
    if config.blocks == 0:
        return 1
    return config.kernel_width ** (config.blocks + 1)


class _Block:
    def __init__(self, cfg: TcnConfig, dilation: int, rng, drop_rng, name: str):
        c, k = cfg.channels, cfg.kernel_width
        self.name = name
        self.pad = (k - 1) * dilation // 2
        self.layers = [
            Conv1d(c, c, k, dilation, bias=False, rng=rng, name=f"{name}.conv"),
            BatchNorm1d(c, cfg.bn_momentum, name=f"{name}.bn1"),
            ReLU(f"{name}.relu1"),
            Dropout(cfg.dropout, drop_rng, f"{name}.drop1"),
            Conv1d(c, c, 1, 1, bias=False, rng=rng, name=f"{name}.pw"),
            BatchNorm1d(c, cfg.bn_momentum, name=f"{name}.bn2"),
            ReLU(f"{name}.relu2"),
            Dropout(cfg.dropout, drop_rng, f"{name}.drop2"),
        ]

    def forward(self, x, training, check):
        y = x
        for layer in self.layers:
            y = check(layer.forward(y, training), layer.name)
        t_out = y.shape[2]
        return x[:, :, self.pad:self.pad + t_out] + y

    def backward(self, g):
        gy = g
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        gy[:, :, self.pad:self.pad + g.shape[2]] += g
        return gy


class TcnModel:
    """Lifts ``(batch, 2N, time)`` 2D sequences to ``(batch, 3N, time_out)``."""

    def __init__(self, config: TcnConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        self.training = False
        self.grad_hooks = {}
        self._forward_done = False
        cfg = config
        if cfg.blocks == 0:
            self.stem = []
            self.blocks = []
            self.head = Conv1d(cfg.in_features, cfg.out_features, 1, 1, True, rng, "head")
        else:
            self.stem = [
                Conv1d(cfg.in_features, cfg.channels, cfg.kernel_width, 1, False, rng, "expand.conv"),
                BatchNorm1d(cfg.channels, cfg.bn_momentum, name="expand.bn"),
                ReLU("expand.relu"),
                Dropout(cfg.dropout, self.dropout_rng, "expand.drop"),
            ]
            self.blocks = [
                _Block(cfg, d, rng, self.dropout_rng, f"blocks.{i}")
                for i, d in enumerate(cfg.dilations())
            ]
            self.head = Conv1d(cfg.channels, cfg.out_features, 1, 1, True, rng, "head")

    # -- bookkeeping ---------------------------------------------------------
    def _all_layers(self):
        yield from self.stem
        for b in self.blocks:
            yield from b.layers
        yield self.head

    def parameters(self) -> list:
        return [p for layer in self._all_layers() for p in layer.parameters()]

    def buffers(self) -> list:
        return [b for layer in self._all_layers() for b in layer.buffers()]

    def named_tensors(self) -> dict:
        """Every parameter and running statistic keyed by name, in a fixed order."""
        return {t.name: t for t in self.parameters() + self.buffers()}

    def relu_masks(self) -> list:
        return [l.last_mask for l in self._all_layers() if isinstance(l, ReLU)]

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.config)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def output_length(self, t: int) -> int:
        return t - self.receptive_field + 1

    # -- passes --------------------------------------------------------------
    @staticmethod
    def _check(x, name):
        if not np.all(np.isfinite(x)):
            raise NumericFailureError(f"non-finite activation after layer {name}", layer=name)
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.config.in_features:
            raise ValueError(
                f"expected input (batch, {self.config.in_features}, time), got {x.shape}"
            )
        if x.shape[2] < self.receptive_field:
            raise SequenceTooShortError(
                f"sequence of {x.shape[2]} frames, model needs {self.receptive_field}"
            )
        h = x.transpose(1, 0, 2)
        for layer in self.stem:
            h = self._check(layer.forward(h, self.training), layer.name)
        for block in self.blocks:
            h = block.forward(h, self.training, self._check)
        h = self._check(self.head.forward(h, self.training), "head")
        self._forward_done = True
        return h.transpose(1, 0, 2)

    def __call__(self, x):
        return self.forward(x)

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for ``d loss / d output``.

        Returns the gradient with respect to the network input.
        """
        if not self._forward_done:
            raise StateError("backward called without a recorded forward pass")
        self._forward_done = False
        g = np.asarray(grad_output, dtype=np.float64).transpose(1, 0, 2).copy()
        g = self.head.backward(g)
        for block in reversed(self.blocks):
            g = block.backward(g)
        for layer in reversed(self.stem):
            g = layer.backward(g)
        for p in self.parameters():
            if p.grad is None:
                p.zero_grad()
            hook = self.grad_hooks.get(p.name)
            if hook is not None:
                p.grad = hook(p.grad)
        return g.transpose(1, 0, 2)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
