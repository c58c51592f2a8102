from __future__ import annotations

import numpy as np

from ..errors import NumericFailureError


def lr_at_epoch(cfg, epoch: int) -> float:
    """Exponential schedule: ``base_lr * lr_decay ** epoch``."""
    return cfg.base_lr * cfg.lr_decay ** epoch


def is_batchnorm(name: str) -> bool:
    return ".bn" in name


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Weight decay shrinks non-batchnorm parameters by ``lr * weight_decay``
    before the moment update, independently of the gradient.
    """

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr=None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericFailureError(f"non-finite gradient in {p.name}", layer=p.name)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if p.grad is None:
                continue
            if self.weight_decay and not is_batchnorm(p.name):
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict:
        out = {"step": np.array([self.step_count], dtype=np.float64)}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        if "step" not in arrays:
            return
        self.step_count = int(arrays["step"][0])
        for name in self.m:
            if f"m/{name}" in arrays:
                self.m[name] = arrays[f"m/{name}"].copy()
                self.v[name] = arrays[f"v/{name}"].copy()


def adam_step(model, cfg, optimizer: Adam = None, lr=None) -> Adam:
    """One update of ``model`` from its accumulated gradients."""
    if optimizer is None:
        optimizer = Adam(model.parameters(), cfg.base_lr, weight_decay=cfg.weight_decay)
    optimizer.step(lr)
    return optimizer
