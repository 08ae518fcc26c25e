"""Functional forms of the dense-math primitives, with input validation."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from ..errors import ConfigError, DimensionError, NumericError
from . import kernels
from .layers import MultiHeadAttention
from .tensor import check_finite


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul output")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if np.isnan(x).any():
        raise NumericError("NaN in softmax input")
    if not np.isfinite(x).all():
        raise NumericError("Inf in softmax input")
    return kernels.softmax_rows(np.ascontiguousarray(x))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x)
    d = x.shape[-1]
    if np.shape(gamma) != (d,) or np.shape(beta) != (d,):
        raise DimensionError(f"gamma/beta must have shape ({d},)")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    gamma = np.asarray(gamma, dtype=x.dtype)
    beta = np.asarray(beta, dtype=x.dtype)
    y, _, _ = kernels.layer_norm(np.ascontiguousarray(x.reshape(-1, d)), gamma, beta, float(eps))
    return y.reshape(x.shape)


_MHA_KEYS = ("q", "k", "v", "o")


def multi_head_attention(x: np.ndarray, params: Mapping[str, np.ndarray] | MultiHeadAttention,
                         n_heads: int, mask=None) -> np.ndarray:
    """Eval-mode attention over a single sequence ``x`` of shape ``(s, d)``.

    ``params`` is either a ``MultiHeadAttention`` layer or a mapping with
    ``{q,k,v,o}_weight`` of shape ``(d, d)`` and ``{q,k,v,o}_bias`` of shape
    ``(d,)``. Only bidirectional attention is supported, so ``mask`` must be
    ``None``.
    """
    if mask is not None:
        raise ConfigError("attention masks are not supported (bidirectional encoder)")
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"expected (seq, d) input, got {x.shape}")
    s, d = x.shape
    if n_heads < 1 or d % n_heads != 0:
        raise ConfigError(f"d={d} is not divisible by n_heads={n_heads}")
    if isinstance(params, MultiHeadAttention):
        layer = params
        if layer.n_heads != n_heads:
            raise ConfigError("n_heads differs from the layer's head count")
    else:
        layer = MultiHeadAttention(d, n_heads, 0.0, np.random.default_rng(0), x.dtype)
        for key in _MHA_KEYS:
            lin = getattr(layer, key)
            lin.weight.value[...] = params[f"{key}_weight"]
            lin.bias.value[...] = params[f"{key}_bias"]
    return layer.forward(x[None], train=False)[0]
