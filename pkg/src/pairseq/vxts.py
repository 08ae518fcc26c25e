"""VXTS voxel-timeseries container plus its JSON sidecar.

Binary layout, little-endian: ``b"VXTS"``, u32 version (1), u32 T, u32 D,
then ``T * D`` float32 values row-major. Metadata lives next to the binary in
``<stem>.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"VXTS"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def encode_vxts(data: np.ndarray) -> bytes:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2:
        raise DataError(f"VXTS payload must be 2-D, got shape {data.shape}")
    t, d = data.shape
    return _HEADER.pack(MAGIC, VERSION, t, d) + data.tobytes()


def decode_vxts(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise DataError("VXTS file too short")
    magic, version, t, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError("bad VXTS magic")
    if version != VERSION:
        raise DataError(f"unsupported VXTS version {version}")
    expected = _HEADER.size + 4 * t * d
    if len(blob) != expected:
        raise DataError(f"VXTS size mismatch: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(t, d).astype(np.float32)


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def write_vxts(path: str | Path, data: np.ndarray, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_vxts(data))
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return path


def read_vxts(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    data = decode_vxts(path.read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return data, meta
