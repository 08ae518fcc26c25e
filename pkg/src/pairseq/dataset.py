"""5-seq extraction, NTP/SG pair construction and cross-validation folds."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapError, ConfigError, DataError, InsufficientDataError, StructureError
from .model import CLS_DIM, D_MODEL, SEP_DIM, SEP_POS, SEQ_LEN, SEQ_POSITIONS
from .preprocess import RunTimeseries, validate_clip_table
from .vxts import write_vxts

log = logging.getLogger(__name__)

WINDOWS = ("first", "second")
TASKS = ("ntp", "sg")


class Label(enum.IntEnum):
    UNDEFINED = -1
    NO = 0
    YES = 1

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(eq=False)
class FiveSeq:
    subject_id: str
    run_id: int
    run_kind: str
    clip_index: int
    window: str
    genre_id: int
    start: int
    images: np.ndarray  # (5, 420)
    has_successor: bool = False

    @property
    def ref(self) -> tuple[int, int, str]:
        return (self.run_id, self.clip_index, self.window)

    def __repr__(self) -> str:
        return (f"FiveSeq(sub={self.subject_id}, run={self.run_id}, clip={self.clip_index}, "
                f"{self.window}, genre={self.genre_id})")


@dataclass(eq=False)
class PairedSample:
    seq1: FiveSeq
    seq2: FiveSeq
    ntp_label: Label
    sg_label: Label

    def __post_init__(self):
        if self.seq1.subject_id != self.seq2.subject_id:
            raise DataError("paired 5-seqs must come from the same subject")

    @property
    def subject_id(self) -> str:
        return self.seq1.subject_id


@dataclass(frozen=True)
class FoldSpec:
    heldout_run_id: int
    seed: int
    n_train_cap: int
    n_val_cap: int

    def __post_init__(self):
        if self.n_train_cap <= 0 or self.n_val_cap <= 0:
            raise ConfigError("sample caps must be positive")
        if self.n_train_cap % 2 or self.n_val_cap % 2:
            raise ConfigError("sample caps must be even to keep labels balanced")


def extract_5seqs(runs: list[RunTimeseries]) -> list[FiveSeq]:
    """Cut every retained clip into its two 5-TR windows.

    Test runs keep only the first occurrence of each clip. A 5-seq has a
    successor when another retained 5-seq of the same run starts right
    after it.
    """
    seqs: list[FiveSeq] = []
    for run in sorted(runs, key=lambda r: (r.subject_id, r.run_id)):
        try:
            validate_clip_table(run.clip_table, run.n_timepoints)
        except StructureError as exc:
            raise StructureError(f"subject {run.subject_id} run {run.run_id}: {exc}") from None
        seen: set[int] = set()
        run_seqs = []
        for clip in run.clip_table:
            if clip.clip_index in seen:
                if run.run_kind == "test":
                    continue
                raise StructureError(
                    f"training run {run.run_id} repeats clip index {clip.clip_index}"
                )
            seen.add(clip.clip_index)
            for w, window in enumerate(WINDOWS):
                start = clip.start + w * SEQ_LEN
                run_seqs.append(FiveSeq(
                    subject_id=run.subject_id,
                    run_id=run.run_id,
                    run_kind=run.run_kind,
                    clip_index=clip.clip_index,
                    window=window,
                    genre_id=clip.genre_id,
                    start=start,
                    images=run.images[start:start + SEQ_LEN],
                ))
        starts = {s.start for s in run_seqs}
        for s in run_seqs:
            s.has_successor = (s.start + SEQ_LEN) in starts
        seqs.extend(run_seqs)
    return seqs


def _by_subject(seqs: list[FiveSeq]) -> dict[str, list[FiveSeq]]:
    groups: dict[str, list[FiveSeq]] = defaultdict(list)
    for s in seqs:
        groups[s.subject_id].append(s)
    return {k: sorted(v, key=lambda s: (s.run_id, s.start)) for k, v in sorted(groups.items())}


def _draw_excluding(rng: np.random.Generator, n: int, excluded: list[int]) -> int:
    """Uniform index in ``range(n)`` skipping the distinct indices in ``excluded``."""
    j = int(rng.integers(n - len(excluded)))
    for e in sorted(excluded):
        if j >= e:
            j += 1
    return j


def build_ntp_pairs(seqs: list[FiveSeq], rng: np.random.Generator) -> list[PairedSample]:
    """One positive and one negative NTP pair for every 5-seq with a successor.

    The negative's partner is uniform over the subject's other 5-seqs, never
    the true successor. Each subject draws from its own child generator,
    spawned from ``rng`` in sorted subject order.
    """
    groups = _by_subject(seqs)
    pairs: list[PairedSample] = []
    for group, sub_rng in zip(groups.values(), rng.spawn(len(groups))):
        if len(group) < 3:
            raise InsufficientDataError(
                f"subject {group[0].subject_id} has {len(group)} 5-seqs; NTP needs at least 3"
            )
        where = {(s.run_id, s.start): i for i, s in enumerate(group)}
        for i, seq in enumerate(group):
            if not seq.has_successor:
                continue
            k = where[(seq.run_id, seq.start + SEQ_LEN)]
            succ = group[k]
            other = group[_draw_excluding(sub_rng, len(group), [i, k])]
            for partner, ntp in ((succ, Label.YES), (other, Label.NO)):
                sg = Label.YES if partner.genre_id == seq.genre_id else Label.NO
                pairs.append(PairedSample(seq, partner, ntp, sg))
    return pairs


def build_sg_pairs(seqs: list[FiveSeq], rng: np.random.Generator) -> list[PairedSample]:
    """One same-genre and one different-genre partner for every 5-seq.

    A 5-seq that is the only one of its genre for its subject gets neither
    pair (so labels stay balanced); this is logged.
    """
    groups = _by_subject(seqs)
    pairs: list[PairedSample] = []
    for group, sub_rng in zip(groups.values(), rng.spawn(len(groups))):
        genres = np.array([s.genre_id for s in group])
        if len(np.unique(genres)) < 2:
            raise InsufficientDataError(
                f"subject {group[0].subject_id} has fewer than two genres; SG needs two"
            )
        members = {g: np.flatnonzero(genres == g) for g in np.unique(genres)}
        others = {g: np.flatnonzero(genres != g) for g in members}
        skipped = 0
        for i, seq in enumerate(group):
            same = members[seq.genre_id]
            if len(same) < 2:
                skipped += 1
                continue
            pos_at = int(np.searchsorted(same, i))
            pos = group[same[_draw_excluding(sub_rng, len(same), [pos_at])]]
            diff = others[seq.genre_id]
            neg = group[diff[int(sub_rng.integers(len(diff)))]]
            pairs.append(PairedSample(seq, pos, Label.UNDEFINED, Label.YES))
            pairs.append(PairedSample(seq, neg, Label.UNDEFINED, Label.NO))
        if skipped:
            log.warning("subject %s: skipped %d 5-seqs with no same-genre partner",
                        group[0].subject_id, skipped)
    return pairs


def task_label(pair: PairedSample, task: str) -> Label:
    return pair.ntp_label if task == "ntp" else pair.sg_label


def balanced_cap(pairs: list[PairedSample], cap: int, task: str,
                 rng: np.random.Generator) -> list[PairedSample]:
    """Uniformly keep ``cap/2`` yes and ``cap/2`` no pairs, preserving order."""
    if cap % 2:
        raise ConfigError("cap must be even")
    labels = np.array([task_label(p, task) for p in pairs], dtype=int)
    yes = np.flatnonzero(labels == Label.YES)
    no = np.flatnonzero(labels == Label.NO)
    available = 2 * min(len(yes), len(no))
    if cap > available:
        raise CapError(f"cannot draw {cap} balanced {task} samples", available)
    half = cap // 2
    keep = np.sort(np.concatenate([
        rng.choice(yes, size=half, replace=False),
        rng.choice(no, size=half, replace=False),
    ]))
    return [pairs[i] for i in keep]


def build_fold(seqs: list[FiveSeq], fold: FoldSpec, task: str = "ntp"
               ) -> tuple[list[PairedSample], list[PairedSample]]:
    """Split by held-out run, build pairs inside each side, cap both sides.

    Validation pairs use only 5-seqs of the held-out run; training pairs use
    only 5-seqs of every other run.
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    training_runs = {s.run_id for s in seqs if s.run_kind == "training"}
    if fold.heldout_run_id not in training_runs:
        raise ConfigError(
            f"held-out run {fold.heldout_run_id} is not one of the training runs {sorted(training_runs)}"
        )
    builder = build_ntp_pairs if task == "ntp" else build_sg_pairs
    train_seqs = [s for s in seqs if s.run_id != fold.heldout_run_id]
    val_seqs = [s for s in seqs if s.run_id == fold.heldout_run_id]
    rng_train, rng_val, rng_cap_train, rng_cap_val = np.random.default_rng(fold.seed).spawn(4)
    train = balanced_cap(builder(train_seqs, rng_train), fold.n_train_cap, task, rng_cap_train)
    val = balanced_cap(builder(val_seqs, rng_val), fold.n_val_cap, task, rng_cap_val)
    return train, val


# manifests ---------------------------------------------------------------


def manifest_entries(pairs: list[PairedSample], fold: int | None, split: str) -> list[dict]:
    return [
        {
            "seq1_ref": list(p.seq1.ref),
            "seq2_ref": list(p.seq2.ref),
            "ntp_label": str(p.ntp_label),
            "sg_label": str(p.sg_label),
            "subject": p.subject_id,
            "fold": fold,
            "split": split,
        }
        for p in pairs
    ]


def manifest_bytes(train: list[PairedSample], val: list[PairedSample], fold: int | None) -> bytes:
    entries = manifest_entries(train, fold, "train") + manifest_entries(val, fold, "val")
    return (json.dumps(entries, sort_keys=True, separators=(",", ":")) + "\n").encode()


def manifest_digest(train, val, fold) -> str:
    return hashlib.sha256(manifest_bytes(train, val, fold)).hexdigest()


class PairDataset:
    """Array-backed view of a list of pairs for fast batch assembly."""

    def __init__(self, pairs: list[PairedSample], task: str):
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        self.pairs = pairs
        self.task = task
        index: dict[int, int] = {}
        images = []
        s1, s2 = [], []
        for p in pairs:
            for seq, out in ((p.seq1, s1), (p.seq2, s2)):
                key = id(seq)
                if key not in index:
                    index[key] = len(images)
                    images.append(seq.images)
                out.append(index[key])
        d = pairs[0].seq1.images.shape[1] if pairs else D_MODEL
        self.images = np.stack(images).astype(np.float32) if images else np.zeros((0, SEQ_LEN, d), np.float32)
        self.seq1_index = np.array(s1, dtype=np.int64)
        self.seq2_index = np.array(s2, dtype=np.int64)
        self.ntp_labels = np.array([int(p.ntp_label) for p in pairs], dtype=np.int64)
        self.sg_labels = np.array([int(p.sg_label) for p in pairs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        return self.ntp_labels if self.task == "ntp" else self.sg_labels

    def inputs(self, idx) -> np.ndarray:
        """Assembled ``(len(idx), 12, d)`` inputs for the given sample indices."""
        idx = np.asarray(idx)
        d = self.images.shape[2]
        x = np.zeros((len(idx), SEQ_POSITIONS, d), dtype=np.float32)
        x[:, 0, CLS_DIM] = 1.0
        x[:, 1:SEP_POS] = self.images[self.seq1_index[idx]]
        x[:, SEP_POS, SEP_DIM] = 1.0
        x[:, SEP_POS + 1:] = self.images[self.seq2_index[idx]]
        return x

    def image_pool(self) -> np.ndarray:
        """Every distinct data image referenced by this split, shape ``(n, d)``."""
        return self.images.reshape(-1, self.images.shape[2])


def materialize(dataset: PairDataset, path: str | Path, fold: int | None = None) -> Path:
    """Write assembled inputs as a VXTS matrix of ``12 * N`` rows plus a sample index."""
    x = dataset.inputs(np.arange(len(dataset)))
    meta = {
        "kind": "paired-samples",
        "rows_per_sample": SEQ_POSITIONS,
        "samples": manifest_entries(dataset.pairs, fold, "materialized"),
    }
    return write_vxts(path, x.reshape(-1, x.shape[2]), meta)

