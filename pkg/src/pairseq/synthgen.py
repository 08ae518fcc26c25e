"""Genre-structured synthetic voxel timeseries with the source dataset's run layout.

Each voxel's raw signal is::

    baseline + slope * t + strength * pattern[genre(t)] + ar1(t) + noise_sd * eps(t)

where ``pattern`` is a fixed per-subject, per-genre vector, ``ar1`` is a
unit-variance AR(1) process that runs unbroken through the whole run (which
is what makes next-5-seq prediction learnable), and ``eps`` is white noise.
The baseline and linear drift are removed again by preprocessing.

Training runs hold 40 clips (4 per genre, no genre twice in a row); test
runs play 10 clips, one per genre, four times over.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .numerics import kernels
from .preprocess import (
    DEFAULT_THRESHOLD,
    AtlasEntry,
    AtlasTable,
    RunTimeseries,
    build_roi_mask,
    format_atlas,
    preprocess_raw_run,
    run_filename,
)
from .vxts import write_vxts

# atlas voxels beyond the ROI target, all below threshold
EXTRA_ATLAS_VOXELS = 64
# voxels at or above threshold = target minus this (the source ROI had 413 for 417 slots)
ATLAS_SHORTFALL = 4


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 1
    n_training_runs: int = 12
    n_test_runs: int = 6
    clips_per_training_run: int = 40
    genres: int = 10
    trs_per_clip: int = 10
    n_voxels: int = 417
    genre_signal_strength: float = 1.0
    temporal_corr: float = 0.9
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_training_runs < 1 or self.n_test_runs < 0:
            raise ConfigError("need at least one subject and one training run")
        if self.genres < 2:
            raise ConfigError("need at least two genres")
        if self.clips_per_training_run < self.genres:
            raise ConfigError("each training run must hold every genre at least once")
        if self.trs_per_clip != 10:
            raise ConfigError("clips are 10 TRs long")
        if self.n_voxels <= ATLAS_SHORTFALL:
            raise ConfigError("n_voxels too small")
        if self.genre_signal_strength < 0 or self.noise_sd < 0:
            raise ConfigError("signal strength and noise sd must be non-negative")
        if not 0.0 <= self.temporal_corr < 1.0:
            raise ConfigError("temporal_corr must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthData:
    spec: SynthSpec
    atlas: AtlasTable
    raw: list[tuple[np.ndarray, dict]]  # (T, n_atlas) float32 + sidecar meta

    def preprocessed(self, threshold: float = DEFAULT_THRESHOLD) -> list[RunTimeseries]:
        mask = build_roi_mask(self.atlas, threshold, self.spec.n_voxels)
        return [preprocess_raw_run(raw, meta, self.atlas, mask) for raw, meta in self.raw]

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "atlas.txt").write_text(format_atlas(self.atlas))
        for raw, meta in self.raw:
            write_vxts(out / "raw" / run_filename(meta["subject_id"], meta["run_id"]), raw, meta)
        return out


def make_atlas(spec: SynthSpec, threshold: float = DEFAULT_THRESHOLD) -> AtlasTable:
    """An anterior/posterior atlas whose union straddles ``threshold``.

    ``n_voxels - 4`` voxels reach the threshold, so sizing the mask must pad
    with the four best sub-threshold voxels. About a fifth of the voxels are
    listed in both regions with different probabilities.
    """
    rng = np.random.default_rng([spec.seed, 7001])
    n_total = spec.n_voxels + EXTRA_ATLAS_VOXELS
    n_above = spec.n_voxels - ATLAS_SHORTFALL
    box = np.array([(x, y, z) for x in range(20, 36) for y in range(40, 60) for z in range(30, 42)])
    coords = box[np.sort(rng.choice(len(box), size=n_total, replace=False))]
    probs = np.concatenate([
        rng.uniform(threshold + 0.01, 0.95, size=n_above),
        rng.uniform(0.02, threshold - 0.01, size=n_total - n_above),
    ])
    rng.shuffle(probs)
    entries = []
    for (x, y, z), p in zip(coords.tolist(), probs):
        region = "A" if rng.random() < 0.5 else "P"
        entries.append(AtlasEntry(x, y, z, region, round(float(p), 6)))
        if rng.random() < 0.2:
            other = "P" if region == "A" else "A"
            entries.append(AtlasEntry(x, y, z, other, round(float(p) * rng.uniform(0.2, 0.95), 6)))
    return AtlasTable(tuple(entries))


def genre_order(n_clips: int, genres: int, rng: np.random.Generator) -> list[int]:
    """Balanced random genre sequence with no genre immediately repeated."""
    base = np.resize(np.arange(genres), n_clips)
    for _ in range(10_000):
        order = rng.permutation(base)
        if np.all(order[1:] != order[:-1]):
            return order.tolist()
    raise ConfigError("could not find a genre order without repeats")  # pragma: no cover


def _run_layout(spec: SynthSpec, run_id: int, rng: np.random.Generator):
    if run_id < spec.n_training_runs:
        genres = genre_order(spec.clips_per_training_run, spec.genres, rng)
        clip_ids = list(range(len(genres)))
        return "training", genres, clip_ids
    once = rng.permutation(spec.genres).tolist()
    return "test", once * 4, list(range(spec.genres)) * 4


def generate(spec: SynthSpec) -> SynthData:
    atlas = make_atlas(spec)
    coords = atlas.unique_coords()
    n_atlas = len(coords)
    tr = spec.trs_per_clip
    rho = spec.temporal_corr
    innov_sd = np.sqrt(1.0 - rho * rho)
    raw_runs = []
    for s in range(spec.n_subjects):
        subject_id = f"{s + 1:02d}"
        prng = np.random.default_rng([spec.seed, 7002, s])
        patterns = prng.standard_normal((spec.genres, n_atlas))
        baseline = prng.normal(10.0, 2.0, size=n_atlas)
        for run_id in range(spec.n_training_runs + spec.n_test_runs):
            rng = np.random.default_rng([spec.seed, 7003, s, run_id])
            kind, genres, clip_ids = _run_layout(spec, run_id, rng)
            t_len = len(genres) * tr
            genre_t = np.repeat(genres, tr)
            z0 = rng.standard_normal(n_atlas)
            innov = innov_sd * rng.standard_normal((t_len, n_atlas))
            drift = kernels.ar1_filter(innov, rho, z0)
            noise = spec.noise_sd * rng.standard_normal((t_len, n_atlas))
            slope = rng.normal(0.0, 0.005, size=n_atlas)
            t = np.arange(t_len)[:, None]
            raw = baseline + slope * t + spec.genre_signal_strength * patterns[genre_t] + drift + noise
            meta = {
                "subject_id": subject_id,
                "run_id": run_id,
                "run_kind": kind,
                "clip_table": [[c, g, i * tr] for i, (c, g) in enumerate(zip(clip_ids, genres))],
                "coords": [list(c) for c in coords],
            }
            raw_runs.append((raw.astype(np.float32), meta))
    return SynthData(spec, atlas, raw_runs)


def generate_runs(spec: SynthSpec) -> list[RunTimeseries]:
    """Generate and push through the standard preprocessing path."""
    return generate(spec).preprocessed()
