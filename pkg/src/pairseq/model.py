"""The paired-sequence transformer.

Inputs are twelve 420-dim vectors ``[CLS, a0..a4, SEP, b0..b4]`` that go
straight into the encoder after additive sinusoidal position encoding;
there is no learned input embedding. Three heads read the encoder output:

* ``ntp_head``: CLS -> 210 -> 2 (next-thought prediction, index 1 = "yes")
* ``mbm_head``: masked position -> 840 (ReLU) -> 420 (reconstruction)
* ``sg_head``:  CLS -> 2 (same-genre finetuning)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import kernels
from .numerics.layers import EncoderBlock, Linear, Module, ReLU

D_MODEL = 420
SEQ_POSITIONS = 12
SEQ_LEN = 5
CLS_POS = 0
SEP_POS = SEQ_LEN + 1
CLS_DIM, SEP_DIM, MSK_DIM = 0, 1, 2
N_TOKEN_DIMS = 3


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = D_MODEL
    seq_positions: int = SEQ_POSITIONS
    n_layers: int = 3
    n_heads: int = 2
    forward_expansion: int = 4
    dropout_p: float = 0.1
    ntp_hidden: int | None = None  # default d_model // 2
    mbm_hidden: int | None = None  # default 2 * d_model

    def __post_init__(self):
        if self.d_model <= N_TOKEN_DIMS:
            raise ConfigError("d_model must leave room for the three token dimensions")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.forward_expansion < 1 or self.seq_positions < 1:
            raise ConfigError("n_layers, forward_expansion and seq_positions must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")

    @property
    def ntp_width(self) -> int:
        return self.ntp_hidden or self.d_model // 2

    @property
    def mbm_width(self) -> int:
        return self.mbm_hidden or 2 * self.d_model

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def token_vectors(d: int = D_MODEL, dtype=np.float32) -> dict[str, np.ndarray]:
    eye = np.eye(d, dtype=dtype)
    return {"CLS": eye[CLS_DIM], "SEP": eye[SEP_DIM], "MSK": eye[MSK_DIM]}


def assemble_input(seq1, seq2, d: int = D_MODEL) -> np.ndarray:
    """Lay out ``[CLS, seq1, SEP, seq2]`` as a ``(2*SEQ_LEN + 2, d)`` array.

    ``seq1``/``seq2`` are ``FiveSeq`` objects or ``(SEQ_LEN, d)`` arrays.
    """
    a = np.asarray(getattr(seq1, "images", seq1))
    b = np.asarray(getattr(seq2, "images", seq2))
    for name, s in (("seq1", a), ("seq2", b)):
        if s.shape != (SEQ_LEN, d):
            raise DimensionError(f"{name} must have shape ({SEQ_LEN}, {d}), got {s.shape}")
    out = np.zeros((2 * SEQ_LEN + 2, d), dtype=np.result_type(a.dtype, b.dtype))
    out[CLS_POS, CLS_DIM] = 1
    out[1:SEP_POS] = a
    out[SEP_POS, SEP_DIM] = 1
    out[SEP_POS + 1:] = b
    return out


def positional_encoding(n_positions: int = SEQ_POSITIONS, d: int = D_MODEL) -> np.ndarray:
    """Fixed sinusoidal table: even dims sin, odd dims cos, base 10000."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.zeros((n_positions, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def positional_encode(x: np.ndarray) -> np.ndarray:
    s, d = x.shape[-2:]
    return x + positional_encoding(s, d).astype(x.dtype)


class NtpHead(Module):
    def __init__(self, d: int, hidden: int, rng, dtype):
        self.proj1 = Linear(d, hidden, rng, dtype)
        self.proj2 = Linear(hidden, 2, rng, dtype)

    def forward(self, x):
        return self.proj2.forward(self.proj1.forward(x))

    def backward(self, dy):
        return self.proj1.backward(self.proj2.backward(dy))


class MbmHead(Module):
    def __init__(self, d: int, hidden: int, rng, dtype):
        self.dense1 = Linear(d, hidden, rng, dtype)
        self.act = ReLU()
        self.dense2 = Linear(hidden, d, rng, dtype)

    def forward(self, x):
        return self.dense2.forward(self.act.forward(self.dense1.forward(x)))

    def backward(self, dy):
        return self.dense1.backward(self.act.backward(self.dense2.backward(dy)))


class SgHead(Module):
    def __init__(self, d: int, rng, dtype):
        self.proj = Linear(d, 2, rng, dtype)

    def forward(self, x):
        return self.proj.forward(x)

    def backward(self, dy):
        return self.proj.backward(dy)


def softmax2(logits: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(logits.reshape(-1, logits.shape[-1]))
    return kernels.softmax_rows(flat).reshape(logits.shape)


class PairedSequenceTransformer(Module):
    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.config = config
        self.dtype = np.dtype(dtype)
        d = config.d_model
        self.encoder = [
            EncoderBlock(d, config.n_heads, config.forward_expansion, config.dropout_p, rng, dtype)
            for _ in range(config.n_layers)
        ]
        self.ntp_head = NtpHead(d, config.ntp_width, rng, dtype)
        self.mbm_head = MbmHead(d, config.mbm_width, rng, dtype)
        self.sg_head = SgHead(d, rng, dtype)
        self._pe = positional_encoding(config.seq_positions, d).astype(dtype)

    # forward / backward -------------------------------------------------

    def encode(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        """Run position encoding and the encoder stack on ``(batch, seq, d)`` input."""
        if x.ndim != 3 or x.shape[1:] != self._pe.shape:
            raise DimensionError(f"expected (batch, {self._pe.shape[0]}, {self._pe.shape[1]}), got {x.shape}")
        h = x.astype(self.dtype, copy=False) + self._pe
        for block in self.encoder:
            h = block.forward(h, train, rng)
        return h

    def encode_backward(self, dh: np.ndarray) -> np.ndarray:
        for block in reversed(self.encoder):
            dh = block.backward(dh)
        return dh

    def ntp_probs(self, cls_vec: np.ndarray) -> np.ndarray:
        return softmax2(self.ntp_head.forward(cls_vec))

    def mbm_reconstruct(self, rows: np.ndarray) -> np.ndarray:
        return self.mbm_head.forward(rows)

    def sg_probs(self, cls_vec: np.ndarray) -> np.ndarray:
        return softmax2(self.sg_head.forward(cls_vec))

    # parameters ----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], skip: tuple[str, ...] = ()) -> None:
        own = dict(self.named_parameters())
        wanted = {k for k in own if not k.startswith(skip)} if skip else set(own)
        missing = wanted - set(state)
        if missing:
            raise DimensionError(f"state is missing tensors: {sorted(missing)[:5]}")
        for name in sorted(wanted):
            value = np.asarray(state[name])
            if value.shape != own[name].shape:
                raise DimensionError(f"{name}: expected {own[name].shape}, got {value.shape}")
            own[name].assign(value.astype(self.dtype))

    def reinit_sg_head(self, seed: int | np.random.Generator) -> None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.sg_head = SgHead(self.config.d_model, rng, self.dtype)

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config."""
    d, e = config.d_model, config.forward_expansion
    attn = 4 * (d * d + d)
    norms = 2 * 2 * d
    ff = d * (e * d) + e * d + (e * d) * d + d
    h1, h2 = config.ntp_width, config.mbm_width
    heads = (d * h1 + h1 + h1 * 2 + 2) + (d * h2 + h2 + h2 * d + d) + (d * 2 + 2)
    return config.n_layers * (attn + norms + ff) + heads
