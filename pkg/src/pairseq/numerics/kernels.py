"""Row-wise hot kernels, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``PAIRSEQ_NUMBA`` is not set
to ``0``/``false``/``off``. Both paths are always importable as
``NUMPY_KERNELS`` and ``NUMBA_KERNELS`` so tests and the benchmark can
compare them directly.

All kernels take 2-D C-contiguous arrays of shape ``(rows, n)``; callers
reshape higher-rank tensors before dispatch. Results of the two paths agree
to floating-point rounding, not bit-for-bit.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = os.environ.get("PAIRSEQ_NUMBA", "1").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_backward_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def _layer_norm_np(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _layer_norm_backward_np(dy, xhat, rstd, gamma):
    n = xhat.shape[1]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    dx = (rstd[:, None] / n) * (
        n * g - g.sum(axis=1, keepdims=True) - xhat * (g * xhat).sum(axis=1, keepdims=True)
    )
    return dx.astype(xhat.dtype, copy=False), dgamma, dbeta


def _ar1_filter_np(innovations, rho, z0):
    out = np.empty_like(innovations)
    z = z0.copy()
    for t in range(innovations.shape[0]):
        z = rho * z + innovations[t]
        out[t] = z
    return out


def _detrend_standardize_np(x, rel_tol):
    # columns are independent series over rows (time)
    t_len = x.shape[0]
    t = np.arange(t_len, dtype=np.float64)
    tc = t - t.mean()
    denom = (tc * tc).sum()
    mean = x.mean(axis=0)
    slope = (tc @ (x - mean)) / denom
    resid = x - mean - np.outer(tc, slope)
    sd = np.sqrt((resid * resid).mean(axis=0))
    scale = np.maximum(np.abs(x).max(axis=0), 1.0)
    degenerate = sd <= rel_tol * scale
    safe = np.where(degenerate, 1.0, sd)
    out = resid / safe
    out[:, degenerate] = 0.0
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


def _softmax_rows_nb(x):
    rows, n = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x[r, j] - m)
            out[r, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[r, j] *= inv
    return out


def _softmax_rows_backward_nb(y, dy):
    rows, n = y.shape
    out = np.empty_like(y)
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += dy[r, j] * y[r, j]
        for j in range(n):
            out[r, j] = y[r, j] * (dy[r, j] - s)
    return out


def _layer_norm_nb(x, gamma, beta, eps):
    rows, n = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += x[r, j]
        mean = s / n
        v = 0.0
        for j in range(n):
            d = x[r, j] - mean
            v += d * d
        inv = 1.0 / math.sqrt(v / n + eps)
        rstd[r] = inv
        for j in range(n):
            h = (x[r, j] - mean) * inv
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


def _layer_norm_backward_nb(dy, xhat, rstd, gamma):
    rows, n = xhat.shape
    dx = np.empty_like(xhat)
    dgamma = np.zeros(n, dtype=np.float64)
    dbeta = np.zeros(n, dtype=np.float64)
    for r in range(rows):
        sg = 0.0
        sgx = 0.0
        for j in range(n):
            g = dy[r, j] * gamma[j]
            sg += g
            sgx += g * xhat[r, j]
            dgamma[j] += dy[r, j] * xhat[r, j]
            dbeta[j] += dy[r, j]
        c = rstd[r] / n
        for j in range(n):
            g = dy[r, j] * gamma[j]
            dx[r, j] = c * (n * g - sg - xhat[r, j] * sgx)
    return dx, dgamma.astype(xhat.dtype), dbeta.astype(xhat.dtype)


def _ar1_filter_nb(innovations, rho, z0):
    t_len, n = innovations.shape
    out = np.empty_like(innovations)
    for j in range(n):
        z = z0[j]
        for t in range(t_len):
            z = rho * z + innovations[t, j]
            out[t, j] = z
    return out


def _detrend_standardize_nb(x, rel_tol):
    t_len, n = x.shape
    out = np.empty_like(x)
    tbar = (t_len - 1) / 2.0
    denom = 0.0
    for t in range(t_len):
        denom += (t - tbar) * (t - tbar)
    for j in range(n):
        s = 0.0
        mx = 0.0
        for t in range(t_len):
            s += x[t, j]
            a = abs(x[t, j])
            if a > mx:
                mx = a
        mean = s / t_len
        num = 0.0
        for t in range(t_len):
            num += (t - tbar) * (x[t, j] - mean)
        slope = num / denom
        ss = 0.0
        for t in range(t_len):
            r = x[t, j] - mean - slope * (t - tbar)
            out[t, j] = r
            ss += r * r
        sd = math.sqrt(ss / t_len)
        if sd <= rel_tol * max(mx, 1.0):
            for t in range(t_len):
                out[t, j] = 0.0
        else:
            for t in range(t_len):
                out[t, j] /= sd
    return out


_NAMES = (
    "softmax_rows",
    "softmax_rows_backward",
    "layer_norm",
    "layer_norm_backward",
    "ar1_filter",
    "detrend_standardize",
)

NUMPY_KERNELS = SimpleNamespace(
    **{name: globals()[f"_{name}_np"] for name in _NAMES}, name="numpy"
)

if numba is not None:
    NUMBA_KERNELS = SimpleNamespace(
        **{
            name: numba.njit(cache=True, nogil=True)(globals()[f"_{name}_nb"])
            for name in _NAMES
        },
        name="numba",
    )
else:  # pragma: no cover
    NUMBA_KERNELS = None

active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def _dispatch(name):
    def call(*args):
        return getattr(active, name)(*args)

    call.__name__ = name
    return call


softmax_rows = _dispatch("softmax_rows")
softmax_rows_backward = _dispatch("softmax_rows_backward")
layer_norm = _dispatch("layer_norm")
layer_norm_backward = _dispatch("layer_norm_backward")
ar1_filter = _dispatch("ar1_filter")
detrend_standardize = _dispatch("detrend_standardize")


def backend_name() -> str:
    return active.name
