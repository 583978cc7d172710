"""Mis-instruction detection and target-preserving probability calibration.

A sample is *mis-instructed* when the teacher's argmax class differs from the
ground-truth label. Calibration rescales every non-target probability by
``s = alpha * sigma`` and assigns the freed mass to the target class, where
``sigma = 1 / (1 - p_gt + p_k)`` is the largest scale for which the target
stays strictly maximal. Non-target pairwise ratios (the "dark knowledge")
are untouched because all non-target entries share one scale factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .probvec import argmax_index

POLICIES = ("none", "skip", "loca")


@dataclass(frozen=True)
class CalibrationConfig:
    """Batch calibration policy.

    policy "none" leaves teacher probabilities alone, "skip" flags
    mis-instructed samples for exclusion from the distillation term, and
    "loca" rewrites them so the target class wins.
    """

    alpha: float = 0.95
    policy: str = "none"
    ratio_tolerance: float = 1e-12
    # The alpha sweep deliberately probes alpha >= 1 (where the target class
    # is no longer guaranteed to win); everything else keeps the check on.
    allow_unsafe_alpha: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}, expected one of {POLICIES}")
        if self.policy == "loca" and not self.allow_unsafe_alpha and not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1) for the loca policy, got {self.alpha}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class CalibrationOutcome:
    calibrated: np.ndarray
    was_misinstructed: bool
    sigma: float
    s: float
    dropped: bool = False


@dataclass(frozen=True)
class BatchStats:
    total: int
    misinstructed: int
    ratio: float
    calibrated: int
    dropped: int


def is_misinstructed(p, gt: int) -> bool:
    """True iff the argmax class (lowest index on ties) is not ``gt``."""
    return argmax_index(p) != gt


def sigma_threshold(p, gt: int) -> float:
    """Supremum of feasible non-target scale factors, 1/(1 - p_gt + p_k).

    Always in (0, 1]; equals 1 exactly when the sample is predicted
    correctly (p_k == p_gt).
    """
    p = np.asarray(p, dtype=np.float64)
    k = argmax_index(p)
    return 1.0 / (1.0 - p[gt] + p[k])


def calibrate_with_scale(p, gt: int, s: float) -> np.ndarray:
    """Apply the calibration transform with an explicit scale ``s``.

    Non-target entries become ``s * p_i``; the target absorbs the remaining
    mass. Exposed separately so tests can probe the boundary ``s == sigma``;
    production code goes through :func:`calibrate_loca`.
    """
    p = np.asarray(p, dtype=np.float64)
    out = s * p
    out[gt] = 1.0 - (out.sum() - out[gt])
    return out


def calibrate_loca(p, gt: int, alpha: float) -> CalibrationOutcome:
    """Calibrate one teacher probability vector toward its true class.

    Correctly predicted samples pass through unchanged. For mis-instructed
    samples the result is a valid distribution with a strict argmax at
    ``gt`` and all non-target pairwise ratios preserved.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= gt < p.shape[0]:
        raise ValueError(f"class index {gt} out of range [0, {p.shape[0]})")
    sigma = sigma_threshold(p, gt)
    s = alpha * sigma
    if not is_misinstructed(p, gt):
        return CalibrationOutcome(p, False, sigma, s)
    return CalibrationOutcome(calibrate_with_scale(p, gt, s), True, sigma, s)


def calibrate_batch(P: np.ndarray, labels: np.ndarray, alpha: float):
    """Vectorized calibration of a row-wise batch.

    Returns ``(P_cal, mis_mask, sigma, s)``. Rows that are not
    mis-instructed are copied through bit-identically.
    """
    P = np.asarray(P, dtype=np.float64)
    labels = np.asarray(labels)
    n = P.shape[0]
    rows = np.arange(n)
    k = P.argmax(axis=1)
    mis = k != labels
    sigma = 1.0 / (1.0 - P[rows, labels] + P[rows, k])
    s = alpha * sigma
    P_cal = P.copy()
    if mis.any():
        idx = rows[mis]
        scaled = s[idx, None] * P[idx]
        # target entry = 1 - s * (total non-target mass)
        scaled[np.arange(idx.size), labels[idx]] = 1.0 - s[idx] * (1.0 - P[idx, labels[idx]])
        P_cal[idx] = scaled
    return P_cal, mis, sigma, s


def apply_policy(probs, labels, config: CalibrationConfig):
    """Apply the configured policy to a batch of (prob vector, label) pairs.

    Returns per-sample outcomes in input order plus batch statistics.
    """
    P = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if P.ndim != 2:
        raise ValueError("probs must be a 2-D batch with one row per sample (equal class counts)")
    if P.shape[0] != labels.shape[0]:
        raise ValueError(f"{P.shape[0]} probability rows but {labels.shape[0]} labels")

    if config.policy == "loca":
        P_cal, mis, sigma, s = calibrate_batch(P, labels, config.alpha)
    else:
        k = P.argmax(axis=1)
        mis = k != labels
        rows = np.arange(P.shape[0])
        sigma = 1.0 / (1.0 - P[rows, labels] + P[rows, k])
        s = config.alpha * sigma
        P_cal = P

    dropped = mis if config.policy == "skip" else np.zeros_like(mis)
    outcomes = [
        CalibrationOutcome(P_cal[i], bool(mis[i]), float(sigma[i]), float(s[i]), bool(dropped[i]))
        for i in range(P.shape[0])
    ]
    n_mis = int(mis.sum())
    stats = BatchStats(
        total=P.shape[0],
        misinstructed=n_mis,
        ratio=n_mis / P.shape[0] if P.shape[0] else 0.0,
        calibrated=n_mis if config.policy == "loca" else 0,
        dropped=int(dropped.sum()),
    )
    return outcomes, stats


class LogitCalibrator(BaseEstimator):
    """Estimator-style wrapper around :func:`apply_policy`.

    ``transform`` takes the teacher probability matrix together with the
    labels (the transform is label-conditional, so labels are a transform
    argument rather than fit state). ``fit`` is stateless and kept for
    pipeline compatibility.
    """

    def __init__(self, alpha: float = 0.95, policy: str = "loca"):
        self.alpha = alpha
        self.policy = policy

    def fit(self, P=None, y=None):
        CalibrationConfig(alpha=self.alpha, policy=self.policy)  # validate params
        return self

    def transform(self, P, y) -> np.ndarray:
        config = CalibrationConfig(alpha=self.alpha, policy=self.policy)
        outcomes, stats = apply_policy(P, y, config)
        self.stats_ = stats
        return np.stack([o.calibrated for o in outcomes])

    def fit_transform(self, P, y) -> np.ndarray:
        return self.fit(P, y).transform(P, y)
