"""Windowing, statistic traces and threshold alarms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError, ParseError
from ..statistics import cosine_distance, median_heuristic, mmd_biased

STATISTICS = {"cos": "cos", "cosine": "cos", "mmd": "mmd"}


@dataclass
class WindowPair:
    index: int
    past: np.ndarray
    future: np.ndarray
    stride: int = 1


def make_window_pairs(X: np.ndarray, w: int, stride: int = 1) -> list[WindowPair]:
    """Pairs (X[i-w:i], X[i:i+w]) for split points i = w, w + stride, ..., <= t - w."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if w < 1 or stride < 1:
        raise ContractError(f"window {w} and stride {stride} must be positive")
    if len(X) < 2 * w:
        raise ContractError(f"series of length {len(X)} is shorter than 2w = {2 * w}")
    return [WindowPair(i, X[i - w:i], X[i:i + w], stride) for i in range(w, len(X) - w + 1, stride)]


@dataclass
class DetectionTrace:
    split_indices: np.ndarray
    statistic: np.ndarray
    threshold: float = float("inf")
    stride: int = 1
    sigma: float | None = None
    name: str = "trace"

    def __post_init__(self):
        self.split_indices = np.asarray(self.split_indices, dtype=np.int64)
        self.statistic = np.asarray(self.statistic, dtype=np.float64)
        if self.split_indices.shape != self.statistic.shape:
            raise ContractError("one statistic value per split index is required")

    @property
    def alarms(self) -> np.ndarray:
        return self.statistic > self.threshold

    def with_threshold(self, threshold: float) -> "DetectionTrace":
        return DetectionTrace(self.split_indices, self.statistic, float(threshold), self.stride,
                              self.sigma, self.name)

    def to_csv(self) -> str:
        rows = ["split_index,statistic,alarm"]
        rows += [f"{i},{s:.17g},{int(a)}" for i, s, a in zip(self.split_indices, self.statistic, self.alarms)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> tuple["DetectionTrace", np.ndarray]:
        """Parse :meth:`to_csv` output; returns the trace and its stored alarm column."""
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "split_index,statistic,alarm":
            raise ParseError("trace header must be split_index,statistic,alarm", 1)
        idx, stat, alarm = [], [], []
        for n, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != 3 or parts[2].strip() not in ("0", "1"):
                raise ParseError("expected split_index,statistic,alarm with alarm 0/1", n)
            try:
                idx.append(int(parts[0]))
                stat.append(float(parts[1]))
            except ValueError as exc:
                raise ParseError(str(exc), n) from None
            alarm.append(parts[2].strip() == "1")
        diffs = np.diff(idx)
        stride = int(diffs.min()) if len(diffs) else 1
        return cls(np.array(idx), np.array(stat), stride=stride), np.array(alarm, dtype=bool)


def _encode(fn, windows: np.ndarray, batch: int) -> np.ndarray:
    return np.concatenate([fn(windows[s:s + batch]) for s in range(0, len(windows), batch)])


def _calibration_rows(E: np.ndarray, limit: int = 1000) -> np.ndarray:
    step = max(1, len(E) // limit)
    return E[::step][:limit]


@dataclass
class Scorer:
    """Encoder + statistic; ``sigma`` (MMD bandwidth) is fixed after first use."""

    encoder: object
    statistic: str = "cos"
    sigma: float | None = None
    batch_size: int = 256
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ConfigError(f"unknown statistic {self.statistic!r} (use cos or mmd)")
        self.statistic = STATISTICS[self.statistic]
        modes = getattr(self.encoder, "modes", ("vector", "sequence"))
        if self.statistic == "mmd" and "sequence" not in modes:
            raise ConfigError("the mmd statistic needs a sequence-mode encoder")

    def score(self, pairs: list[WindowPair], name: str = "trace") -> DetectionTrace:
        if not pairs:
            raise ContractError("no window pairs to score")
        past = np.stack([p.past for p in pairs])
        future = np.stack([p.future for p in pairs])
        idx = np.array([p.index for p in pairs])
        if self.statistic == "cos":
            a = _encode(self.encoder.encode_vector, past, self.batch_size)
            b = _encode(self.encoder.encode_vector, future, self.batch_size)
            stat = np.array([cosine_distance(x, y) for x, y in zip(a, b)])
        else:
            a = _encode(self.encoder.encode_sequence, past, self.batch_size)
            b = _encode(self.encoder.encode_sequence, future, self.batch_size)
            if self.sigma is None:
                rows = np.concatenate([a, b]).reshape(-1, a.shape[-1])
                self.sigma = median_heuristic(_calibration_rows(rows))
            stat = np.array([mmd_biased(x, y, self.sigma) for x, y in zip(a, b)])
        return DetectionTrace(idx, stat, stride=pairs[0].stride, sigma=self.sigma, name=name)


def score_pairs(pairs: list[WindowPair], encoder, statistic: str = "cos",
                sigma: float | None = None) -> DetectionTrace:
    return Scorer(encoder, statistic, sigma).score(pairs)


def pair_embeddings(pairs: list[WindowPair], encoder, batch_size: int = 256) -> np.ndarray:
    """[y_past; y_future] pooled embeddings, one row per pair."""
    past = _encode(encoder.encode_vector, np.stack([p.past for p in pairs]), batch_size)
    future = _encode(encoder.encode_vector, np.stack([p.future for p in pairs]), batch_size)
    return np.concatenate([past, future], axis=1)
