"""ROI selection, detrending and standardization of voxel timeseries.

A run's raw ROI matrix ``(T, 417)`` becomes ``T`` images of 420 dims:
dims 0-2 are reserved for the CLS/SEP/MSK tokens and stay zero, dims
3..419 carry each voxel's linearly detrended, z-scored signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, InsufficientAtlasError, StructureError
from .model import D_MODEL, N_TOKEN_DIMS
from .numerics import kernels
from .vxts import read_vxts, write_vxts

log = logging.getLogger(__name__)

GRID_SHAPE = (96, 114, 96)
REGIONS = ("A", "P")
TRS_PER_CLIP = 10
DEFAULT_THRESHOLD = 0.23
DEFAULT_TARGET_VOXELS = D_MODEL - N_TOKEN_DIMS
RUN_KINDS = ("training", "test")
# residual sd at or below this fraction of the series' magnitude counts as constant
DEGENERATE_REL_TOL = 1e-9


class AtlasEntry(NamedTuple):
    x: int
    y: int
    z: int
    region: str
    prob: float

    @property
    def coord(self) -> tuple[int, int, int]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class AtlasTable:
    entries: tuple[AtlasEntry, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not all(0 <= c < n for c, n in zip(e.coord, GRID_SHAPE)):
                raise DataError(f"atlas coordinate {e.coord} outside the {GRID_SHAPE} grid")
            if e.region not in REGIONS:
                raise DataError(f"unknown atlas region {e.region!r}")
            if not 0.0 <= e.prob <= 1.0:
                raise DataError(f"atlas probability {e.prob} outside [0, 1]")
            key = (e.coord, e.region)
            if key in seen:
                raise DataError(f"duplicate atlas entry for {e.coord} region {e.region}")
            seen.add(key)

    def unique_coords(self) -> list[tuple[int, int, int]]:
        return sorted({e.coord for e in self.entries})


def parse_atlas(text: str) -> AtlasTable:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"atlas line {lineno}: expected 'x y z region prob', got {line!r}")
        try:
            x, y, z = (int(v) for v in parts[:3])
            prob = float(parts[4])
        except ValueError as exc:
            raise DataError(f"atlas line {lineno}: {exc}") from exc
        entries.append(AtlasEntry(x, y, z, parts[3].upper(), prob))
    return AtlasTable(tuple(entries))


def format_atlas(atlas: AtlasTable) -> str:
    lines = ["# x y z region prob"]
    lines += [f"{e.x} {e.y} {e.z} {e.region} {e.prob:.6f}" for e in atlas.entries]
    return "\n".join(lines) + "\n"


def read_atlas(path: str | Path) -> AtlasTable:
    return parse_atlas(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class RoiMask:
    voxels: tuple[tuple[tuple[int, int, int], float], ...]
    threshold: float
    n_union: int
    n_above_threshold: int

    @property
    def n_active(self) -> int:
        return len(self.voxels)

    @property
    def coords(self) -> list[tuple[int, int, int]]:
        return [c for c, _ in self.voxels]

    @property
    def n_added(self) -> int:
        return max(0, self.n_active - self.n_above_threshold)

    @property
    def n_removed(self) -> int:
        return max(0, self.n_above_threshold - self.n_active)

    def report(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_union": self.n_union,
            "n_above_threshold": self.n_above_threshold,
            "n_active": self.n_active,
            "n_added_below_threshold": self.n_added,
            "n_removed_above_threshold": self.n_removed,
            "n_token_dims": N_TOKEN_DIMS,
            "image_dims": self.n_active + N_TOKEN_DIMS,
        }


def build_roi_mask(atlas: AtlasTable, threshold: float = DEFAULT_THRESHOLD,
                   target_voxels: int = DEFAULT_TARGET_VOXELS) -> RoiMask:
    """Union the anterior/posterior maps and size the result to ``target_voxels``.

    Voxels in both regions keep the larger probability. Voxels at or above
    ``threshold`` are included; a surplus is trimmed from the lowest
    probabilities and a shortfall is filled from the highest sub-threshold
    ones. Ties break on coordinate. The mask is stored in that same order.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if target_voxels < 1:
        raise ConfigError("target_voxels must be >= 1")
    best: dict[tuple[int, int, int], float] = {}
    for e in atlas.entries:
        if e.prob > best.get(e.coord, -1.0):
            best[e.coord] = e.prob
    if len(best) < target_voxels:
        raise InsufficientAtlasError(
            f"atlas has {len(best)} distinct voxels, fewer than the {target_voxels} requested"
        )
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    n_above = sum(1 for _, p in ranked if p >= threshold)
    return RoiMask(
        voxels=tuple(ranked[:target_voxels]),
        threshold=threshold,
        n_union=len(best),
        n_above_threshold=n_above,
    )


def linear_detrend(series) -> np.ndarray:
    """Subtract the least-squares line over indices ``0..T-1``."""
    y = np.asarray(series, dtype=np.float64)
    if y.ndim != 1 or y.size < 2:
        raise DataError("linear_detrend needs a 1-D series of length >= 2")
    t = np.arange(y.size, dtype=np.float64)
    tc = t - t.mean()
    yc = y - y.mean()
    slope = (tc @ yc) / (tc @ tc)
    return yc - slope * tc


def standardize(series, atol: float = 0.0) -> np.ndarray:
    """Zero mean, unit population sd; series with sd <= ``atol`` map to zeros."""
    y = np.asarray(series, dtype=np.float64)
    if y.ndim != 1 or y.size < 2:
        raise DataError("standardize needs a 1-D series of length >= 2")
    yc = y - y.mean()
    sd = np.sqrt(np.mean(yc * yc))
    if sd <= atol:
        return np.zeros_like(y)
    return yc / sd


class Clip(NamedTuple):
    clip_index: int
    genre_id: int
    start: int


@dataclass(eq=False)
class RunTimeseries:
    subject_id: str
    run_id: int
    run_kind: str
    images: np.ndarray  # (T, 420) float32
    clip_table: list[Clip] = field(default_factory=list)

    def __post_init__(self):
        self.clip_table = [Clip(*c) for c in self.clip_table]
        if self.run_kind not in RUN_KINDS:
            raise DataError(f"run_kind must be one of {RUN_KINDS}, got {self.run_kind!r}")
        validate_clip_table(self.clip_table, self.images.shape[0])

    @property
    def n_timepoints(self) -> int:
        return self.images.shape[0]

    def meta(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "run_id": self.run_id,
            "run_kind": self.run_kind,
            "clip_table": [list(c) for c in self.clip_table],
        }


def validate_clip_table(clips: list[Clip], n_timepoints: int) -> None:
    if n_timepoints % TRS_PER_CLIP:
        raise StructureError(f"run length {n_timepoints} is not a multiple of {TRS_PER_CLIP}")
    if len(clips) * TRS_PER_CLIP != n_timepoints:
        raise StructureError(
            f"{len(clips)} clips of {TRS_PER_CLIP} TRs do not tile a run of {n_timepoints} TRs"
        )
    for i, c in enumerate(clips):
        if c.start != i * TRS_PER_CLIP:
            raise StructureError(f"clip {i} starts at {c.start}, expected {i * TRS_PER_CLIP}")


def detrend_standardize_columns(raw: np.ndarray) -> np.ndarray:
    """Detrend then z-score every column of a ``(T, n)`` matrix, in float64."""
    x = np.ascontiguousarray(raw, dtype=np.float64)
    if x.shape[0] < 2:
        raise DataError("need at least two timepoints")
    return kernels.detrend_standardize(x, DEGENERATE_REL_TOL)


def assemble_run(raw_voxels: np.ndarray, mask: RoiMask, meta: dict) -> RunTimeseries:
    raw = np.asarray(raw_voxels)
    if raw.ndim != 2 or raw.shape[1] != mask.n_active:
        raise DataError(f"raw matrix has shape {raw.shape}, mask expects {mask.n_active} columns")
    if mask.n_active != DEFAULT_TARGET_VOXELS:
        raise DataError(f"images need {DEFAULT_TARGET_VOXELS} voxels, mask has {mask.n_active}")
    t = raw.shape[0]
    if t % TRS_PER_CLIP:
        raise StructureError(f"run length {t} is not a multiple of {TRS_PER_CLIP}")
    images = np.zeros((t, D_MODEL), dtype=np.float32)
    images[:, N_TOKEN_DIMS:] = detrend_standardize_columns(raw)
    return RunTimeseries(
        subject_id=str(meta["subject_id"]),
        run_id=int(meta["run_id"]),
        run_kind=meta["run_kind"],
        images=images,
        clip_table=[Clip(*c) for c in meta["clip_table"]],
    )


def select_mask_columns(raw: np.ndarray, coords: list, mask: RoiMask) -> np.ndarray:
    """Pick the mask's voxels, in mask order, out of a whole-atlas raw matrix."""
    index = {tuple(c): i for i, c in enumerate(coords)}
    if len(index) != raw.shape[1]:
        raise DataError(f"{raw.shape[1]} raw columns but {len(index)} coordinates")
    try:
        cols = [index[c] for c in mask.coords]
    except KeyError as exc:
        raise DataError(f"mask voxel {exc.args[0]} missing from raw data") from exc
    return raw[:, cols]


def run_filename(subject_id: str, run_id: int) -> str:
    return f"sub-{subject_id}_run-{run_id:02d}.vxts"


def save_run(run: RunTimeseries, out_dir: str | Path) -> Path:
    return write_vxts(Path(out_dir) / run_filename(run.subject_id, run.run_id), run.images, run.meta())


def load_run(path: str | Path) -> RunTimeseries:
    data, meta = read_vxts(path)
    if not meta:
        raise DataError(f"{path}: missing JSON sidecar")
    return RunTimeseries(
        subject_id=str(meta["subject_id"]),
        run_id=int(meta["run_id"]),
        run_kind=meta["run_kind"],
        images=data,
        clip_table=meta["clip_table"],
    )


def load_runs(data_dir: str | Path) -> list[RunTimeseries]:
    paths = sorted(Path(data_dir).glob("*.vxts"))
    if not paths:
        raise DataError(f"no .vxts runs found in {data_dir}")
    runs = [load_run(p) for p in paths]
    return sorted(runs, key=lambda r: (r.subject_id, r.run_id))


def preprocess_raw_run(raw: np.ndarray, meta: dict, atlas: AtlasTable, mask: RoiMask) -> RunTimeseries:
    coords = meta.get("coords") or atlas.unique_coords()
    coords = [tuple(c) for c in coords]
    return assemble_run(select_mask_columns(raw, coords, mask), mask, meta)
