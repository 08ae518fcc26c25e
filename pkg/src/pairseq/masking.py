"""Masked Brain Modeling corruption.

One or two of the ten data positions (never CLS at 0 or SEP at 6) are
chosen per input; each chosen image becomes the MSK token (80%), a random
pool image (10%) or is left as is (10%). Plans are drawn before position
encoding is added.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import PoolError
from .model import MSK_DIM, SEP_POS, SEQ_POSITIONS

DATA_POSITIONS = tuple(p for p in range(1, SEQ_POSITIONS) if p != SEP_POS)
ACTION_PROBS = (0.8, 0.1, 0.1)


class MaskAction(enum.IntEnum):
    MSK = 0
    RANDOM = 1
    KEEP = 2


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple[int, ...]
    actions: tuple[MaskAction, ...]
    # pool index for RANDOM actions, -1 elsewhere
    random_index: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= len(self.positions) <= 2 or len(set(self.positions)) != len(self.positions):
            raise ValueError(f"a plan masks one or two distinct positions, got {self.positions}")
        if any(p not in DATA_POSITIONS for p in self.positions):
            raise ValueError(f"positions {self.positions} include a token slot")

    def targets(self, x: np.ndarray) -> np.ndarray:
        """Original images at the chosen positions (copy, shape ``(k, d)``)."""
        return np.array(x[list(self.positions)], copy=True)


def plan_mask(rng: np.random.Generator, pool_size: int = 0) -> MaskPlan:
    count = 1 + int(rng.integers(2))
    slots = rng.choice(len(DATA_POSITIONS), size=count, replace=False)
    actions = rng.choice(3, size=count, p=ACTION_PROBS)
    random_index = tuple(
        int(rng.integers(pool_size)) if a == MaskAction.RANDOM and pool_size > 0 else -1
        for a in actions
    )
    return MaskPlan(
        positions=tuple(DATA_POSITIONS[s] for s in slots),
        actions=tuple(MaskAction(a) for a in actions),
        random_index=random_index,
    )


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream keyed on (seed, epoch, sample index)."""
    return np.random.default_rng([seed, epoch, index])


def epoch_plans(seed: int, epoch: int, n_samples: int, pool_size: int) -> list[MaskPlan]:
    return [plan_mask(sample_rng(seed, epoch, i), pool_size) for i in range(n_samples)]


def apply_mask(x: np.ndarray, plan: MaskPlan, random_pool: np.ndarray | None = None) -> np.ndarray:
    """Return a corrupted copy of one assembled ``(12, d)`` input."""
    out = np.array(x, copy=True)
    for pos, action, ridx in zip(plan.positions, plan.actions, plan.random_index):
        if action == MaskAction.MSK:
            out[pos] = 0
            out[pos, MSK_DIM] = 1
        elif action == MaskAction.RANDOM:
            if random_pool is None or len(random_pool) == 0:
                raise PoolError("random replacement drawn but the image pool is empty")
            if not 0 <= ridx < len(random_pool):
                raise PoolError(f"pool index {ridx} out of range for pool of {len(random_pool)}")
            out[pos] = random_pool[ridx]
    return out


def apply_masks(x: np.ndarray, plans: list[MaskPlan], random_pool: np.ndarray | None
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch form of ``apply_mask``.

    Returns the corrupted batch and, flattened over every masked slot, the
    sample index, the position, and the pre-corruption target image.
    """
    out = np.empty_like(x)
    rows, cols, targets = [], [], []
    for i, plan in enumerate(plans):
        out[i] = apply_mask(x[i], plan, random_pool)
        rows.extend([i] * len(plan.positions))
        cols.extend(plan.positions)
        targets.append(plan.targets(x[i]))
    return out, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.concatenate(targets)
