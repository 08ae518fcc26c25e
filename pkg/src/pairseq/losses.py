"""Task losses and the multitask combination."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import ConfigError, DimensionError

PROB_CLAMP = 1e-12
ALPHA_TOL = 1e-9


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """``-log(probs[label])`` with probabilities clamped below at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (2,):
        raise DimensionError(f"expected two class probabilities, got shape {probs.shape}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 (no) or 1 (yes), got {label}")
    return float(-np.log(max(probs[label], PROB_CLAMP)))


def ntp_loss(probs: np.ndarray, label: int) -> float:
    return cross_entropy(probs, label)


def sg_loss(probs: np.ndarray, label: int) -> float:
    return cross_entropy(probs, label)


def mbm_loss(recons: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    """Mean squared error per masked image, averaged over the 1 or 2 images."""
    if len(recons) != len(targets) or len(recons) not in (1, 2):
        raise DimensionError("mbm_loss takes one or two (reconstruction, target) pairs")
    per_pair = []
    for r, t in zip(recons, targets):
        r = np.asarray(r, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if r.shape != t.shape or r.ndim != 1:
            raise DimensionError(f"reconstruction {r.shape} and target {t.shape} differ")
        per_pair.append(float(np.mean((r - t) ** 2)))
    return float(np.mean(per_pair))


def check_alphas(alpha1: float, alpha2: float) -> None:
    if alpha1 < 0 or alpha2 < 0 or abs(alpha1 + alpha2 - 1.0) > ALPHA_TOL:
        raise ConfigError(
            f"loss weights must be non-negative and satisfy alpha1 + alpha2 = 1, "
            f"got ({alpha1}, {alpha2})"
        )


def multitask_loss(e_ntp: float, e_mbm: float, alpha1: float, alpha2: float) -> float:
    check_alphas(alpha1, alpha2)
    return alpha1 * e_ntp + alpha2 * e_mbm


# batched forms used by the training loop ---------------------------------


def batch_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = probs[np.arange(len(labels)), labels].astype(np.float64)
    return -np.log(np.maximum(p, PROB_CLAMP))


def cross_entropy_logit_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(-log p_label)/d logits = p - onehot (per sample, unscaled)."""
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1
    return grad
