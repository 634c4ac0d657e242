"""Margin F1 and validation threshold sweep.

A change point counts as detected (one true positive) when some alarm lies
within ``margin`` of it.  Alarms near no change point are false positives,
except that a run of such alarms at adjacent split indices counts once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, ValidationError
from .pipeline import DetectionTrace


@dataclass
class F1Report:
    margin: int
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    matched: list[tuple[int, int]] = field(default_factory=list)


def _runs(indices: np.ndarray, stride: int) -> int:
    if indices.size == 0:
        return 0
    return 1 + int(np.sum(np.diff(np.sort(indices)) != stride))


def margin_f1(split_indices, alarms, labels, margin: int, stride: int | None = None) -> F1Report:
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    split_indices = np.asarray(split_indices, dtype=np.int64)
    alarms = np.asarray(alarms, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if stride is None:
        d = np.diff(np.sort(split_indices))
        stride = int(d.min()) if d.size else 1
    hits = split_indices[alarms]
    matched = []
    for cp in labels:
        near = hits[np.abs(hits - cp) <= margin]
        if near.size:
            matched.append((int(cp), int(near[np.argmin(np.abs(near - cp))])))
    tp = len(matched)
    fn = len(labels) - tp
    if labels.size and hits.size:
        dist = np.abs(hits[:, None] - labels[None, :]).min(axis=1)
        unmatched = hits[dist > margin]
    else:
        unmatched = hits
    fp = _runs(unmatched, stride)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / len(labels) if len(labels) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Report(margin, precision, recall, f1, tp, fp, fn, matched)


def evaluable_labels(split_indices, labels, margin: int) -> np.ndarray:
    """Change points an alarm at some scored split index could match."""
    split_indices = np.asarray(split_indices)
    labels = np.asarray(labels, dtype=np.int64)
    if split_indices.size == 0:
        return labels[:0]
    lo, hi = split_indices.min() - margin, split_indices.max() + margin
    return labels[(labels >= lo) & (labels <= hi)]


def evaluate_trace(trace: DetectionTrace, labels, margin: int) -> F1Report:
    labels = evaluable_labels(trace.split_indices, labels, margin)
    return margin_f1(trace.split_indices, trace.alarms, labels, margin, trace.stride)


@dataclass
class SweepResult:
    threshold: float
    f1: float
    margin: int


def candidate_thresholds(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique values u and, per option j, the alarm cut ``stat > u[j-1]``.

    Option 0 alarms everywhere (threshold below the minimum); option j >= 1
    alarms on values strictly above ``u[j-1]``.
    """
    u = np.unique(values)
    return u, np.concatenate([[-np.inf], u])


def threshold_sweep(trace: DetectionTrace, labels, margin: int) -> SweepResult:
    """Threshold maximising validation margin-F1.

    Thresholds in [u_j, u_{j+1}) give identical alarms, so the sweep scores
    each gap once.  Optimal gaps adjacent in value are merged; the widest
    merged range wins (ties: the lowest), and its midpoint is returned.
    An all-equal trace gets ``max + 1`` (no alarms).
    """
    labels = evaluable_labels(trace.split_indices, labels, margin)
    if labels.size == 0:
        raise ValidationError("threshold sweep needs at least one validation change point")
    values = trace.statistic
    u, cuts = candidate_thresholds(values)
    if u.size == 1:
        delta = float(u[0]) + 1.0
        return SweepResult(delta, evaluate_trace(trace.with_threshold(delta), labels, margin).f1, margin)
    scores = np.array([
        margin_f1(trace.split_indices, values > c, labels, margin, trace.stride).f1 for c in cuts
    ])
    best = scores.max()
    opt = np.flatnonzero(np.isclose(scores, best, rtol=0.0, atol=1e-12))
    # gap j spans [lower[j], upper[j]); the outer gaps are unbounded
    lower = np.concatenate([[-np.inf], u])
    upper = np.concatenate([u, [np.inf]])
    runs, start = [], opt[0]
    for a, b in zip(opt[:-1], opt[1:]):
        if b != a + 1:
            runs.append((start, a))
            start = b
    runs.append((start, opt[-1]))
    spread = max(float(u[-1] - u[0]), 1.0)

    def width(run):
        lo, hi = lower[run[0]], upper[run[1]]
        return (hi - lo) if np.isfinite(lo) and np.isfinite(hi) else np.inf

    run = max(runs, key=lambda r: (width(r), -r[0]))
    lo, hi = lower[run[0]], upper[run[1]]
    if not np.isfinite(hi):
        delta = float(u[-1]) + 1.0 if not np.isfinite(lo) else max(float(lo) + 1.0, float(u[-1]) + 1.0)
    elif not np.isfinite(lo):
        delta = float(hi) - spread
    else:
        delta = 0.5 * (float(lo) + float(hi))
    return SweepResult(delta, float(best), margin)
