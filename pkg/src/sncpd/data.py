"""Time series containers, synthetic generators, CSV I/O and temporal splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, ValidationError


@dataclass
class TimeSeries:
    values: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    name: str = "series"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise ValidationError(f"values must be (t, D), got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("series contains non-finite values")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size:
            if np.any(np.diff(self.labels) <= 0):
                raise ValidationError("change points must be strictly increasing")
            if self.labels[0] < 1 or self.labels[-1] > self.length - 1:
                raise ValidationError(f"change points must lie in [1, {self.length - 1}]")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def _check_cps(cps, t: int) -> np.ndarray:
    cps = np.asarray(sorted(int(c) for c in cps), dtype=np.int64)
    if cps.size and (cps[0] <= 0 or cps[-1] >= t or np.any(np.diff(cps) <= 0)):
        raise ContractError(f"change points must be distinct and inside (0, {t})")
    return cps


def _segment_ids(t: int, cps: np.ndarray) -> np.ndarray:
    return np.searchsorted(cps, np.arange(t), side="right")


def gen_gaussian_mean_shift(D: int, t: int, cps, delta: float, seed: int,
                            noise: float = 1.0) -> TimeSeries:
    """Unit-variance Gaussian noise whose channel means jump by ``delta`` at each CP.

    Segment k has mean ``(k mod 2) * delta * s`` with a fixed random sign
    ``s`` per channel, so every channel moves by exactly ``delta`` at each
    change and the level stays bounded.
    """
    cps = _check_cps(cps, t)
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=D)
    seg = _segment_ids(t, cps)
    means = (seg % 2)[:, None] * delta * signs[None, :]
    values = means + noise * rng.standard_normal((t, D))
    return TimeSeries(values, cps, f"gaussian_mean_shift(D={D},t={t},delta={delta},seed={seed})")


def gen_elliptical(D: int, t: int, cps, scale_shift: float, seed: int, delta: float = 0.0,
                   family: str = "student_t", df: float = 5.0) -> TimeSeries:
    """Elliptical segments alternating scale 1 / ``scale_shift`` (and mean 0 / ``delta``).

    ``family`` is ``"gaussian"`` or ``"student_t"``; the t variant draws
    ``z * sqrt((df - 2) / chi2_df)`` so every segment keeps covariance
    ``scale^2 I`` for ``df > 2``.
    """
    if family not in ("gaussian", "student_t"):
        raise ContractError(f"unknown elliptical family {family!r}")
    if family == "student_t" and df <= 2:
        raise ContractError("student_t needs df > 2 for a finite covariance")
    if scale_shift <= 0:
        raise ContractError("scale_shift must be positive")
    cps = _check_cps(cps, t)
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=D)
    seg = _segment_ids(t, cps)
    odd = (seg % 2)[:, None]
    means = odd * delta * signs[None, :]
    scales = np.where(odd == 1, scale_shift, 1.0)
    z = rng.standard_normal((t, D))
    if family == "student_t":
        z = z * np.sqrt((df - 2.0) / rng.chisquare(df, size=(t, 1)))
    return TimeSeries(means + scales * z, cps,
                      f"elliptical({family},D={D},t={t},scale={scale_shift},seed={seed})")


def random_change_points(t: int, n: int, min_gap: int, rng: np.random.Generator | int) -> np.ndarray:
    """``n`` change points in (0, t), pairwise and boundary gaps at least ``min_gap``."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    slack = t - (n + 1) * min_gap
    if slack < 0:
        raise ContractError(f"cannot fit {n} change points with gap {min_gap} into {t}")
    # spread the slack over the n + 1 gaps uniformly at random
    extra = np.sort(rng.integers(0, slack + 1, size=n))
    return (np.arange(1, n + 1) * min_gap + extra).astype(np.int64)


def normalize_to_sphere(X: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Scale every row to unit Euclidean norm; all-zero rows stay zero."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    return X / np.maximum(norms, eps)


# -- CSV -------------------------------------------------------------------

def write_csv(series: TimeSeries, path: str | Path, with_labels: bool = True) -> None:
    flags = np.zeros(series.length, dtype=int)
    flags[series.labels] = 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [f"c{j}" for j in range(series.channels)]
                   + (["is_cp"] if with_labels else []))
        for i, row in enumerate(series.values):
            w.writerow([i] + [format(v, ".17g") for v in row] + ([flags[i]] if with_labels else []))


def load_csv(path: str | Path, name: str | None = None) -> TimeSeries:
    """Read ``timestamp,c0..c{D-1}[,is_cp]``; ``is_cp`` rows become change points."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if not header or header[0] != "timestamp":
            raise ParseError("first column must be 'timestamp'", 1)
        has_cp = header[-1] == "is_cp"
        chans = header[1:-1] if has_cp else header[1:]
        if not chans or chans != [f"c{j}" for j in range(len(chans))]:
            raise ParseError("channel columns must be named c0, c1, ...", 1)
        values, flags = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                int(row[0])
                vals = [float(c) for c in row[1:1 + len(chans)]]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", lineno)
            if has_cp:
                if row[-1].strip() not in ("0", "1"):
                    raise ParseError(f"is_cp must be 0 or 1, got {row[-1]!r}", lineno)
                flags.append(row[-1].strip() == "1")
            values.append(vals)
    if not values:
        raise ParseError("no data rows", 2)
    labels = np.flatnonzero(flags) if has_cp else np.zeros(0, dtype=np.int64)
    return TimeSeries(np.array(values), labels, name or Path(path).stem)


# -- splits ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if any(not 0.0 < p < 1.0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must lie in (0, 1) and sum to 1, got {parts}")


def split(series: TimeSeries, spec: SplitSpec) -> tuple[TimeSeries, TimeSeries, TimeSeries]:
    """Contiguous train/val/test segments; labels re-based to each segment.

    A change point falling exactly on a segment's first index has no
    "before" inside that segment and is dropped.
    """
    t = series.length
    n_train = int(round(t * spec.train))
    n_val = int(round(t * spec.val))
    bounds = [0, n_train, n_train + n_val, t]
    parts = []
    for tag, lo, hi in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
        if hi <= lo:
            raise ValidationError(f"{tag} split of a length-{t} series is empty")
        local = series.labels[(series.labels > lo) & (series.labels < hi)] - lo
        parts.append(TimeSeries(series.values[lo:hi], local, f"{series.name}:{tag}"))
    return tuple(parts)
