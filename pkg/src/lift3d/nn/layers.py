"""Layers with hand-written reverse-mode gradients.

Activations inside the network use a channels-first ``(C, B, T)`` layout so a
convolution over every sequence of the batch is one matrix product.
Each layer caches what its backward pass needs during ``forward``; calling
``backward`` without a preceding ``forward`` raises :class:`StateError`.
"""

from __future__ import annotations

import numpy as np

from ..errors import SequenceTooShortError, StateError
from .tensor import Tensor


class Layer:
    name = ""

    def parameters(self) -> list:
        return []

    def buffers(self) -> list:
        return []

    def forward(self, x, training: bool):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self.name or type(self).__name__}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache


def _im2col(x: np.ndarray, k: int, dilation: int, t_out: int) -> np.ndarray:
    # (Cin, B, T) -> (Cin * k, B * t_out), row index = c * k + j
    c_in, b, _ = x.shape
    cols = np.stack([x[:, :, j * dilation: j * dilation + t_out] for j in range(k)], axis=1)
    return cols.reshape(c_in * k, b * t_out)


class Conv1d(Layer):
    """Valid (unpadded) dilated 1D convolution, weight shape ``(Cout, Cin, k)``."""

    def __init__(self, c_in, c_out, kernel=1, dilation=1, bias=True, rng=None, name=""):
        rng = np.random.default_rng(0) if rng is None else rng
        bound = 1.0 / np.sqrt(c_in * kernel)
        self.name = name
        self.kernel = kernel
        self.dilation = dilation
        self.weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, kernel)), f"{name}.weight")
        self.bias = Tensor(rng.uniform(-bound, bound, c_out), f"{name}.bias") if bias else None
        self._cache = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def out_length(self, t: int) -> int:
        return t - (self.kernel - 1) * self.dilation

    def forward(self, x, training=False):
        c_in, b, t = x.shape
        t_out = self.out_length(t)
        if t_out < 1:
            raise SequenceTooShortError(
                f"{self.name}: sequence of {t} frames is shorter than the "
                f"{(self.kernel - 1) * self.dilation + 1} frames this layer needs"
            )
        cols = _im2col(x, self.kernel, self.dilation, t_out)
        w2 = self.weight.data.reshape(self.weight.shape[0], -1)
        out = w2 @ cols
        if self.bias is not None:
            out += self.bias.data[:, None]
        self._cache = (cols, x.shape)
        return out.reshape(-1, b, t_out)

    def backward(self, g):
        cols, (c_in, b, t) = self._cached()
        c_out = g.shape[0]
        t_out = g.shape[2]
        g2 = g.reshape(c_out, -1)
        self.weight.accumulate((g2 @ cols.T).reshape(self.weight.shape))
        if self.bias is not None:
            self.bias.accumulate(g2.sum(axis=1))
        dcols = (self.weight.data.reshape(c_out, -1).T @ g2).reshape(c_in, self.kernel, b, t_out)
        dx = np.zeros((c_in, b, t))
        for j in range(self.kernel):
            s = j * self.dilation
            dx[:, :, s:s + t_out] += dcols[:, j]
        return dx


class BatchNorm1d(Layer):
    """Batch normalisation over the batch and time axes of ``(C, B, T)``."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, name=""):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), f"{name}.beta")
        self.running_mean = Tensor(np.zeros(channels), f"{name}.running_mean")
        self.running_var = Tensor(np.ones(channels), f"{name}.running_var")
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x, training=False):
        if training:
            m = x.shape[1] * x.shape[2]
            mean = x.mean(axis=(1, 2))
            var = x.var(axis=(1, 2))
            mom = self.momentum
            self.running_mean.data = (1 - mom) * self.running_mean.data + mom * mean
            unbiased = var * m / max(m - 1, 1)
            self.running_var.data = (1 - mom) * self.running_var.data + mom * unbiased
        else:
            mean = self.running_mean.data
            var = self.running_var.data
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
        self._cache = (xhat, inv_std, training)
        return self.gamma.data[:, None, None] * xhat + self.beta.data[:, None, None]

    def backward(self, g):
        xhat, inv_std, training = self._cached()
        self.gamma.accumulate((g * xhat).sum(axis=(1, 2)))
        self.beta.accumulate(g.sum(axis=(1, 2)))
        gx = g * self.gamma.data[:, None, None]
        if not training:
            return gx * inv_std[:, None, None]
        m = g.shape[1] * g.shape[2]
        s1 = gx.sum(axis=(1, 2))[:, None, None]
        s2 = (gx * xhat).sum(axis=(1, 2))[:, None, None]
        return (inv_std[:, None, None] / m) * (m * gx - s1 - xhat * s2)


class ReLU(Layer):
    def __init__(self, name=""):
        self.name = name
        self._cache = None
        self.last_mask = None

    def forward(self, x, training=False):
        mask = x > 0
        self._cache = mask
        self.last_mask = mask
        return x * mask

    def backward(self, g):
        return g * self._cached()


class Dropout(Layer):
    """Inverted dropout; the mask generator is owned by the model for determinism."""

    def __init__(self, p, rng, name=""):
        self.name = name
        self.p = p
        self.rng = rng
        self._cache = None

    def forward(self, x, training=False):
        if not training or self.p == 0:
            self._cache = 1.0
            return x
        keep = self.rng.random(x.shape) >= self.p
        scale = keep / (1.0 - self.p)
        self._cache = scale
        return x * scale

    def backward(self, g):
        return g * self._cached()


def conv1d_dilated_forward(x, kernel, bias=None, dilation=1):
    """Functional dilated convolution on ``(batch, ch_in, time)`` input.

    ``kernel`` has shape ``(ch_out, ch_in, k)``. Output length is
    ``time - (k - 1) * dilation``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    c_out, c_in, k = kernel.shape
    conv = Conv1d(c_in, c_out, k, dilation, bias=bias is not None)
    conv.weight.data = kernel
    if bias is not None:
        conv.bias.data = np.asarray(bias, dtype=np.float64)
    return conv.forward(x.transpose(1, 0, 2)).transpose(1, 0, 2)
