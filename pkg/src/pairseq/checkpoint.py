"""Binary checkpoint container.

Layout (little-endian)::

    b"PSTX" | u32 version | u32 n | n bytes JSON {"config", "meta"}
    | u32 n_tensors | per tensor: u32 name_len, name (utf-8),
      u32 ndim, ndim * u32 dims, float32 data (C order)

Tensors are written in sorted-name order, so identical parameters always
produce identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError, DimensionError
from .model import ModelConfig, PairedSequenceTransformer

MAGIC = b"PSTX"
VERSION = 1


def save_checkpoint(params: dict[str, np.ndarray], config: ModelConfig, meta: dict | None = None) -> bytes:
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a PSTX checkpoint (bad magic)")
    try:
        version, n = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        header = json.loads(bytes(view[off:off + n]))
        off += n
        (count,) = struct.unpack_from("<I", view, off)
        off += 4
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off:off + name_len]).decode()
            off += name_len
            (ndim,) = struct.unpack_from("<I", view, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint tensors")
    return params, ModelConfig.from_dict(header["config"]), header["meta"]


def model_to_checkpoint(model: PairedSequenceTransformer, meta: dict | None = None) -> bytes:
    return save_checkpoint(model.state_dict(), model.config, meta)


def model_from_checkpoint(blob: bytes, config: ModelConfig | None = None, *, fresh_sg_head_seed=None,
                          dtype=np.float32) -> tuple[PairedSequenceTransformer, dict]:
    """Rebuild a model from checkpoint bytes.

    If ``config`` is given it must match the stored one. With
    ``fresh_sg_head_seed`` the same-genre head is re-initialised instead of
    loaded (the finetuning entry point).
    """
    params, stored, meta = load_checkpoint(blob)
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint config {stored} does not match requested {config}")
    model = PairedSequenceTransformer(stored, seed=0, dtype=dtype)
    skip = ("sg_head.",) if fresh_sg_head_seed is not None else ()
    try:
        model.load_state_dict(params, skip=skip)
    except DimensionError as exc:
        raise CheckpointError(str(exc)) from exc
    if fresh_sg_head_seed is not None:
        model.reinit_sg_head(fresh_sg_head_seed)
    return model, meta
