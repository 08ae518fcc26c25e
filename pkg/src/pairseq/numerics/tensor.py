"""Learnable tensors and finiteness checks.

Plain ``numpy.ndarray`` plays the role of the dense tensor; this module adds
the parameter container that carries gradient and Adam state alongside it.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericError


class ParamTensor:
    """A learnable array with its gradient and Adam moment buffers."""

    __slots__ = ("value", "grad", "adam_m", "adam_v", "step_count")

    def __init__(self, value: np.ndarray):
        value = np.ascontiguousarray(value)
        self.value = value
        self.grad = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)
        self.step_count = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def assign(self, value: np.ndarray) -> None:
        """Replace the value in place, keeping dtype; resets optimizer state."""
        value = np.asarray(value)
        if value.shape != self.value.shape:
            raise DimensionError(f"cannot assign {value.shape} into {self.value.shape}")
        self.value[...] = value
        self.adam_m.fill(0)
        self.adam_v.fill(0)
        self.step_count = 0
        self.grad.fill(0)

    def __repr__(self) -> str:
        return f"ParamTensor(shape={self.shape}, dtype={self.dtype}, step={self.step_count})"


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x
