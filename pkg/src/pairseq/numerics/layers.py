"""Layer primitives with hand-written backward passes.

Every layer caches what it needs during ``forward`` and accumulates parameter
gradients into ``ParamTensor.grad`` during ``backward``. Calling ``backward``
again without a new forward accumulates a second time; call ``zero_grads``
between optimizer steps. Calling ``backward`` before any ``forward`` raises
``BackwardStateError``.

Linear weights are stored as ``(fan_in, fan_out)`` so ``y = x @ W + b``.
"""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from ..errors import BackwardStateError, ConfigError
from . import kernels
from .tensor import ParamTensor


class Module:
    """Minimal container: subclasses set ParamTensor / Module attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, ParamTensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, ParamTensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[ParamTensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @staticmethod
    def _require(cache, layer: str):
        if cache is None:
            raise BackwardStateError(f"{layer}.backward called before forward")
        return cache


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = ParamTensor(_uniform(rng, bound, (n_in, n_out), dtype))
        self.bias = ParamTensor(_uniform(rng, bound, (n_out,), dtype))
        self._x = None

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        # 2-D GEMM; a stacked (batch, seq, d) @ W runs as many small products
        y = x.reshape(-1, self.n_in) @ self.weight.value
        y += self.bias.value
        return y.reshape(*x.shape[:-1], self.n_out)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._require(self._x, "Linear")
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.weight.grad += x2.T @ dy2
        self.bias.grad += dy2.sum(axis=0)
        return (dy2 @ self.weight.value.T).reshape(x.shape)


class ReLU(Module):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        mask = self._require(self._mask, "ReLU")
        return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float32):
        if eps <= 0:
            raise ConfigError("layer norm eps must be positive")
        self.gamma = ParamTensor(np.ones(d, dtype=dtype))
        self.beta = ParamTensor(np.zeros(d, dtype=dtype))
        self.eps = float(eps)
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        d = self.gamma.shape[0]
        x2 = np.ascontiguousarray(x.reshape(-1, d))
        y, xhat, rstd = kernels.layer_norm(x2, self.gamma.value, self.beta.value, self.eps)
        self._cache = (xhat, rstd, x.shape)
        return y.reshape(x.shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, rstd, shape = self._require(self._cache, "LayerNorm")
        dy2 = np.ascontiguousarray(dy.reshape(xhat.shape))
        dx, dgamma, dbeta = kernels.layer_norm_backward(dy2, xhat, rstd, self.gamma.value)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx.reshape(shape)


class Dropout(Module):
    """Inverted dropout: Bernoulli keep-mask scaled by 1/(1-p) in train mode."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)
        self._mask = None
        self._seen = False

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None) -> np.ndarray:
        self._seen = True
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ConfigError("train-mode dropout needs a random generator")
        keep = rng.random(x.shape) >= self.p
        self._mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.p))
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if not self._seen:
            raise BackwardStateError("Dropout.backward called before forward")
        return dy if self._mask is None else dy * self._mask


class MultiHeadAttention(Module):
    """Bidirectional scaled dot-product attention over ``(batch, seq, d)``."""

    def __init__(self, d: int, n_heads: int, dropout_p: float, rng: np.random.Generator,
                 dtype=np.float32):
        if n_heads < 1 or d % n_heads != 0:
            raise ConfigError(f"d_model={d} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self.attn_drop = Dropout(dropout_p)
        self._cache = None

    def _split(self, t: np.ndarray) -> np.ndarray:
        b, s, d = t.shape
        return t.reshape(b, s, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        b, s, d = x.shape
        scale = x.dtype.type(1.0 / np.sqrt(d // self.n_heads))
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = kernels.softmax_rows(np.ascontiguousarray(scores.reshape(-1, s))).reshape(scores.shape)
        attn_d = self.attn_drop.forward(attn, train, rng)
        ctx = attn_d @ v
        self._cache = (q, k, v, attn, attn_d, scale)
        return self.o.forward(ctx.transpose(0, 2, 1, 3).reshape(b, s, d))

    @property
    def last_attention(self) -> np.ndarray | None:
        return None if self._cache is None else self._cache[3]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        q, k, v, attn, attn_d, scale = self._require(self._cache, "MultiHeadAttention")
        b, s, d = dy.shape
        dctx = self._split(self.o.backward(dy))
        dattn_d = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn_d.transpose(0, 1, 3, 2) @ dctx
        dattn = self.attn_drop.backward(dattn_d)
        dscores = kernels.softmax_rows_backward(
            np.ascontiguousarray(attn.reshape(-1, s)),
            np.ascontiguousarray(dattn.reshape(-1, s)),
        ).reshape(attn.shape) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(b, s, d)

        return self.q.backward(merge(dq)) + self.k.backward(merge(dk)) + self.v.backward(merge(dv))


class FeedForward(Module):
    def __init__(self, d: int, expansion: int, rng: np.random.Generator, dtype=np.float32):
        self.lin1 = Linear(d, d * expansion, rng, dtype)
        self.act = ReLU()
        self.lin2 = Linear(d * expansion, d, rng, dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.lin2.forward(self.act.forward(self.lin1.forward(x)))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.lin1.backward(self.act.backward(self.lin2.backward(dy)))


class EncoderBlock(Module):
    """Post-LN encoder block: LN(x + Drop(MHA(x))) then LN(h + Drop(FF(h)))."""

    def __init__(self, d: int, n_heads: int, expansion: int, dropout_p: float,
                 rng: np.random.Generator, dtype=np.float32):
        self.attn = MultiHeadAttention(d, n_heads, dropout_p, rng, dtype)
        self.drop1 = Dropout(dropout_p)
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.ff = FeedForward(d, expansion, rng, dtype)
        self.drop2 = Dropout(dropout_p)
        self.ln2 = LayerNorm(d, dtype=dtype)

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        a = self.drop1.forward(self.attn.forward(x, train, rng), train, rng)
        h = self.ln1.forward(x + a)
        f = self.drop2.forward(self.ff.forward(h), train, rng)
        return self.ln2.forward(h + f)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dz2 = self.ln2.backward(dy)
        dh = dz2 + self.ff.backward(self.drop2.backward(dz2))
        dz1 = self.ln1.backward(dh)
        return dz1 + self.attn.backward(self.drop1.backward(dz1))
