"""Probability- and logit-vector primitives.

All functions operate on plain numpy arrays. A "logit vector" is any finite
1-D float array of length >= 2; a "probability vector" additionally has
strictly positive entries that sum to 1 within ``SUM_TOL``.
"""

from __future__ import annotations

import numpy as np

# Floor applied to probabilities before taking logs, and the floor a clamped
# probability vector is allowed to touch.
PROB_FLOOR = 1e-12

# Absolute tolerance on |sum(p) - 1|.
SUM_TOL = 1e-9


class NotADistributionError(ValueError):
    """Entries do not sum to 1 within tolerance."""


class ProbDomainError(ValueError):
    """An entry lies outside the open interval (0, 1)."""


def as_logits(values) -> np.ndarray:
    """Validate and return a logit vector as a float64 array.

    Raises ValueError on length < 2 or non-finite entries.
    """
    z = np.asarray(values, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ValueError(f"logit vector must be 1-D with length >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logit vector contains non-finite entries")
    return z


def softmax(z, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis.

    Stabilized by subtracting the row max before exponentiation. Accepts a
    single vector or a batch (rows are independent samples). Entries that
    underflow to zero are lifted to ``PROB_FLOOR`` and the row renormalized,
    so every output entry is strictly positive.
    """
    if not (np.isscalar(tau) and np.isfinite(tau) and tau > 0):
        raise ValueError(f"temperature must be a positive finite scalar, got {tau!r}")
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need at least 2 classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite entries")
    scaled = z / tau
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    p = e / e.sum(axis=-1, keepdims=True)
    if p.min() < PROB_FLOOR:
        p = np.maximum(p, PROB_FLOOR)
        p = p / p.sum(axis=-1, keepdims=True)
    return p


def argmax_index(p) -> int:
    """Index of the largest entry; ties resolve to the lowest index."""
    p = np.asarray(p)
    return int(np.argmax(p))


def one_hot(gt: int, n_classes: int) -> np.ndarray:
    """One-hot encode a class index."""
    if not 0 <= gt < n_classes:
        raise ValueError(f"class index {gt} out of range [0, {n_classes})")
    y = np.zeros(n_classes, dtype=np.float64)
    y[gt] = 1.0
    return y


def validate_prob(values, clamp: bool = False) -> np.ndarray:
    """Check that ``values`` is a probability vector and return it.

    Entries must lie in the open interval (0, 1) and sum to 1 within
    ``SUM_TOL``. With ``clamp=True``, entries below ``PROB_FLOOR`` (including
    zeros) are lifted to the floor and the vector renormalized instead of
    rejected; boundary 1.0 entries shrink correspondingly.
    """
    p = np.asarray(values, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ValueError(f"probability vector must be 1-D with length >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("probability vector contains non-finite entries")
    if abs(p.sum() - 1.0) > SUM_TOL:
        raise NotADistributionError(f"entries sum to {p.sum()!r}, not 1 within {SUM_TOL}")
    if p.min() <= 0.0 or p.max() >= 1.0:
        if not clamp:
            raise ProbDomainError("entries must lie strictly inside (0, 1)")
        p = np.maximum(p, PROB_FLOOR)
        # renormalizing can push an entry back under the floor; re-clamp (the
        # residual sum error is at most C * PROB_FLOOR, inside SUM_TOL)
        p = np.maximum(p / p.sum(), PROB_FLOOR)
    return p
