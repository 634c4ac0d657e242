"""Representation dynamics around change points, Mahalanobis rejection
curves, and Monte-Carlo power of the MMD two-sample test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ContractError
from ..statistics import fit_gaussian, median_heuristic, mmd_test
from .evaluation import margin_f1


# -- representation dynamics -------------------------------------------------

@dataclass
class DynamicsResult:
    offsets: np.ndarray
    similarity: np.ndarray
    per_cp: np.ndarray
    shared: int
    n_used: int
    n_skipped: int

    def to_csv(self) -> str:
        rows = ["offset,similarity"] + [f"{o},{s:.17g}" for o, s in zip(self.offsets, self.similarity)]
        return "\n".join(rows) + "\n"


def dynamics_experiment(encoder, X: np.ndarray, labels, w: int, before: int = 300,
                        batch_size: int = 256) -> DynamicsResult:
    """Cosine similarity of embeddings of a pre-change stretch and its spliced copy.

    For each change point nu the stretch ``S = X[nu - before:nu]`` is
    compared with ``S_hat``, whose second half is replaced by
    ``X[nu:nu + before // 2]``.  Window i compares ``S[i:i+w]`` with
    ``S_hat[i:i+w]``; windows ending inside the shared first half see
    identical inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    half = before // 2
    if w > before:
        raise ContractError(f"window {w} longer than the {before}-point stretch")
    curves, skipped = [], 0
    for cp in np.asarray(labels, dtype=np.int64):
        if cp < before or cp + half > len(X):
            skipped += 1
            continue
        S = X[cp - before:cp]
        S_hat = np.concatenate([S[:before - half], X[cp:cp + half]])
        starts = range(before - w + 1)
        A = np.stack([S[i:i + w] for i in starts])
        B = np.stack([S_hat[i:i + w] for i in starts])
        ea = np.concatenate([encoder.encode_vector(A[s:s + batch_size]) for s in range(0, len(A), batch_size)])
        eb = np.concatenate([encoder.encode_vector(B[s:s + batch_size]) for s in range(0, len(B), batch_size)])
        num = np.sum(ea * eb, axis=1)
        den = np.maximum(np.linalg.norm(ea, axis=1) * np.linalg.norm(eb, axis=1), 1e-12)
        curves.append(num / den)
    if not curves:
        raise ContractError("no change point leaves room for the dynamics experiment")
    per_cp = np.stack(curves)
    return DynamicsResult(np.arange(before - w + 1), per_cp.mean(axis=0), per_cp,
                          before - half, len(curves), skipped)


# -- rejection curve ---------------------------------------------------------

@dataclass
class RejectionResult:
    baseline_f1: float
    points: list[tuple[float, float]]
    threshold: float

    def to_csv(self) -> str:
        rows = ["fraction_kept,f1", f"1,{self.baseline_f1:.17g}"]
        rows += [f"{k:.17g},{f:.17g}" for k, f in self.points]
        return "\n".join(rows) + "\n"


def _subset_f1(split_indices, alarms, labels, margin, stride, keep) -> float:
    idx = split_indices[keep]
    live = np.array([cp for cp in labels if np.any(np.abs(idx - cp) <= margin)], dtype=np.int64)
    return margin_f1(idx, alarms[keep], live, margin, stride).f1


def rejection_curve(fit_embeddings: np.ndarray, test_embeddings: np.ndarray, split_indices,
                    alarms, labels, margin: int, stride: int = 1, keep_fraction: float = 0.95,
                    stop_fraction: float = 0.05, threshold: float = float("nan")) -> RejectionResult:
    """F1 after repeatedly dropping the least typical 5% of test pairs.

    A Gaussian fitted to ``fit_embeddings`` scores each test pair by
    Mahalanobis distance.  Each round keeps ``ceil(0.95 n)`` of the current
    ``n`` pairs (at least one fewer), until at most ``stop_fraction`` of the
    original set remains.  Alarms are fixed in advance, i.e. the threshold
    is frozen.  A change point only counts while some kept pair is within
    ``margin`` of it.
    """
    split_indices = np.asarray(split_indices, dtype=np.int64)
    alarms = np.asarray(alarms, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    n0 = len(split_indices)
    if n0 < 20:
        raise ContractError(f"rejection curve needs at least 20 test pairs, got {n0}")
    scores = fit_gaussian(fit_embeddings).score(test_embeddings)
    keep = np.ones(n0, dtype=bool)
    baseline = _subset_f1(split_indices, alarms, labels, margin, stride, keep)
    points = []
    while True:
        current = np.flatnonzero(keep)
        n = current.size
        k = min(n - 1, math.ceil(keep_fraction * n))
        if k < 1:
            break
        order = current[np.argsort(scores[current], kind="stable")]
        keep = np.zeros(n0, dtype=bool)
        keep[order[:k]] = True
        points.append((k / n0, _subset_f1(split_indices, alarms, labels, margin, stride, keep)))
        if k <= stop_fraction * n0:
            break
    return RejectionResult(baseline, points, threshold)


# -- MMD test power ----------------------------------------------------------

@dataclass
class PowerResult:
    sizes: list[int]
    type2_raw: list[float]
    type2_embedded: list[float]
    type1_raw: list[float]
    type1_embedded: list[float]
    trials: int
    alpha: float
    sigma_raw: float
    sigma_embedded: float
    slope_raw: float = float("nan")
    slope_embedded: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        rows = ["n,type2_raw,type2_embedded,type1_raw,type1_embedded"]
        rows += [f"{n},{a:.17g},{b:.17g},{c:.17g},{d:.17g}" for n, a, b, c, d in
                 zip(self.sizes, self.type2_raw, self.type2_embedded, self.type1_raw, self.type1_embedded)]
        return "\n".join(rows) + "\n"


def loglog_slope(sizes, errors, trials: int) -> float:
    """Least-squares slope of log(error) on log(n); zeros floored at 0.5/trials."""
    e = np.maximum(np.asarray(errors, dtype=np.float64), 0.5 / trials)
    return float(np.polyfit(np.log(np.asarray(sizes, dtype=np.float64)), np.log(e), 1)[0])


def binomial_upper(p: float, trials: int, z: float = 1.959963984540054) -> float:
    """Upper end of the normal-approximation binomial confidence interval."""
    return p + z * math.sqrt(p * (1 - p) / trials)


def mmd_power_experiment(sample_inf: Callable[[np.random.Generator, int], np.ndarray],
                         sample_0: Callable[[np.random.Generator, int], np.ndarray],
                         embed: Callable[[np.ndarray], np.ndarray], sizes=(25, 50, 100, 200),
                         alpha: float = 0.05, trials: int = 200, seed: int = 0) -> PowerResult:
    """Type-II (and null type-I) error of the MMD test in raw and embedded space.

    Every trial draws one raw sample pair and tests it in both spaces
    (common random numbers).  Bandwidths are median heuristics from a
    separate calibration draw, one per space.
    """
    rng = np.random.default_rng(seed)
    calib = np.concatenate([sample_inf(rng, 200), sample_0(rng, 200)])
    sigma_raw = median_heuristic(calib)
    sigma_emb = median_heuristic(embed(calib))
    t2r, t2e, t1r, t1e = [], [], [], []
    for n in sizes:
        counts = np.zeros(4)
        for _ in range(trials):
            Z, Xi, Xn = sample_inf(rng, n), sample_0(rng, n), sample_inf(rng, n)
            eZ, eXi, eXn = embed(Z), embed(Xi), embed(Xn)
            counts += [not mmd_test(Z, Xi, sigma_raw, alpha), not mmd_test(eZ, eXi, sigma_emb, alpha),
                       mmd_test(Z, Xn, sigma_raw, alpha), mmd_test(eZ, eXn, sigma_emb, alpha)]
        t2r.append(counts[0] / trials)
        t2e.append(counts[1] / trials)
        t1r.append(counts[2] / trials)
        t1e.append(counts[3] / trials)
    return PowerResult(list(sizes), t2r, t2e, t1r, t1e, trials, alpha, sigma_raw, sigma_emb,
                       loglog_slope(sizes, t2r, trials), loglog_slope(sizes, t2e, trials))
