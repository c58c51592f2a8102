from __future__ import annotations

import numpy as np


class Tensor:
    """A float64 array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if np.shape(g) != self.data.shape:
            raise ValueError(f"{self.name}: gradient shape {np.shape(g)} != {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={self.shape})"
