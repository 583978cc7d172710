"""Batch diagnostics and multi-seed run comparison."""

from __future__ import annotations

from dataclasses import dataclass
from statistics import mean, stdev

import numpy as np


@dataclass(frozen=True)
class MisinstructionStats:
    total: int
    misinstructed: int
    ratio: float
    per_class_misinstructed: tuple  # indexed by ground-truth class


@dataclass(frozen=True)
class RunMetrics:
    """One training run's headline numbers, as consumed by compare_runs."""

    policy: str
    seed: int
    top1: float
    top5: float = float("nan")
    final_loss: float = float("nan")
    calibrated: int = 0
    dropped: int = 0
    seconds: float = float("nan")


@dataclass(frozen=True)
class PolicySummary:
    policy: str
    seeds: tuple
    top1_values: tuple
    mean_top1: float
    std_top1: float
    delta_vs_none: float | None
    mean_top5: float
    calibrated: int
    dropped: int
    seconds: float


@dataclass(frozen=True)
class RunReport:
    rows: tuple  # PolicySummary per policy, input order
    baseline_missing: bool


def misinstruction_ratio(logits, labels) -> MisinstructionStats:
    """Fraction of samples whose highest raw logit is not the label.

    Argmax on raw logits is temperature-invariant, so the same ratio holds
    for any softened version of the batch.
    """
    Z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise ValueError(f"got {Z.shape[0] if Z.ndim == 2 else '?'} logit rows for {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= Z.shape[1]):
        raise ValueError("labels out of range")
    wrong = Z.argmax(axis=1) != y
    per_class = np.bincount(y[wrong], minlength=Z.shape[1])
    n = Z.shape[0]
    return MisinstructionStats(
        total=n,
        misinstructed=int(wrong.sum()),
        ratio=float(wrong.sum()) / n if n else 0.0,
        per_class_misinstructed=tuple(int(c) for c in per_class),
    )


def topk_accuracy(logits, labels, k: int) -> float:
    """Fraction of samples whose label is among the k largest logits.

    Ties resolve toward the lowest class index (stable sort), matching the
    argmax convention, so top-1 is exactly 1 - misinstruction ratio.
    """
    Z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if not 1 <= k <= Z.shape[1]:
        raise ValueError(f"k must lie in [1, {Z.shape[1]}], got {k}")
    if Z.shape[0] != y.shape[0]:
        raise ValueError("logits/labels length mismatch")
    top = np.argsort(-Z, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == y[:, None], axis=1)))


def compare_runs(runs) -> RunReport:
    """Aggregate per-policy mean/stddev over seeds, with deltas vs `none`.

    Sample standard deviation (n-1 denominator), 0.0 for a single run.
    Delta columns are omitted (None) when no `none` baseline is present.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to compare")
    policies = []
    for r in runs:
        if r.policy not in policies:
            policies.append(r.policy)
    grouped = {p: [r for r in runs if r.policy == p] for p in policies}

    baseline = grouped.get("none")
    baseline_mean = mean(r.top1 for r in baseline) if baseline else None

    rows = []
    for policy in policies:
        group = grouped[policy]
        vals = [r.top1 for r in group]
        m = mean(vals)
        rows.append(PolicySummary(
            policy=policy,
            seeds=tuple(r.seed for r in group),
            top1_values=tuple(vals),
            mean_top1=m,
            std_top1=stdev(vals) if len(vals) > 1 else 0.0,
            delta_vs_none=None if baseline_mean is None else m - baseline_mean,
            mean_top5=mean(r.top5 for r in group),
            calibrated=sum(r.calibrated for r in group),
            dropped=sum(r.dropped for r in group),
            seconds=sum(r.seconds for r in group),
        ))
    return RunReport(rows=tuple(rows), baseline_missing=baseline_mean is None)


def format_report(report: RunReport) -> str:
    """Render a RunReport as the one-policy-per-row text table."""
    header = "policy  mean_top1  std_top1  delta_vs_none  calibrated  dropped  seconds"
    lines = [header]
    for row in report.rows:
        delta = "n/a" if row.delta_vs_none is None else f"{row.delta_vs_none:+.4f}"
        lines.append(
            f"{row.policy:<6}  {row.mean_top1:9.4f}  {row.std_top1:8.4f}  "
            f"{delta:>13}  {row.calibrated:10d}  {row.dropped:7d}  {row.seconds:7.2f}"
        )
    if report.baseline_missing:
        lines.append("note: no `none` baseline run; delta column unavailable")
    return "\n".join(lines)
