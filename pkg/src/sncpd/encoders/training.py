"""Crop augmentation, the TS2Vec and BYOL trainers, and the training loop.

Per step the loop does forward, backward, optimizer update, then the
spectral-norm projection, so the weights seen by every forward pass (and
by the next optimizer step) are capped.  After the last step the best
validation snapshot is restored and projected once more with a converged
power iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import diffcore as dc
from ..errors import ContractError, DimensionError, TrainingError
from .losses import byol_loss, hierarchical_loss
from .model import MLP, EncoderModel

log = logging.getLogger(__name__)


# -- augmentation ----------------------------------------------------------

@dataclass
class CropPair:
    view1: np.ndarray
    view2: np.ndarray
    start1: int
    start2: int
    length: int

    @property
    def overlap(self) -> tuple[int, int] | None:
        """Absolute [lo, hi) range shared by both crops, or None."""
        lo = max(self.start1, self.start2)
        hi = min(self.start1, self.start2) + self.length
        return (lo, hi) if hi > lo else None


def sample_crop_starts(full: int, length: int, rng: np.random.Generator,
                       require_overlap: bool = False) -> tuple[int, int]:
    if not 1 <= length <= full:
        raise ContractError(f"crop length {length} does not fit a series of length {full}")
    while True:
        s1, s2 = (int(s) for s in rng.integers(0, full - length + 1, size=2))
        if not require_overlap or abs(s1 - s2) < length:
            return s1, s2


def random_crop_pair(X: np.ndarray, rng: np.random.Generator | int, length: int | None = None,
                     starts: tuple[int, int] | None = None,
                     require_overlap: bool = False) -> CropPair:
    """Two contiguous crops along axis -2 (default length: half the series)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    X = np.asarray(X, dtype=np.float64)
    full = X.shape[-2]
    length = full // 2 if length is None else length
    if starts is None:
        starts = sample_crop_starts(full, length, rng, require_overlap)
    s1, s2 = starts
    for s in starts:
        if not 0 <= s <= full - length:
            raise ContractError(f"crop start {s} out of range for length {length}")
    return CropPair(X[..., s1:s1 + length, :], X[..., s2:s2 + length, :], s1, s2, length)


def ema_update(target, online, beta: float):
    """``beta * target + (1 - beta) * online``."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"EMA rate must lie in [0, 1], got {beta}")
    target, online = np.asarray(target, dtype=np.float64), np.asarray(online, dtype=np.float64)
    if target.shape != online.shape:
        raise DimensionError(f"EMA shapes differ: {target.shape} vs {online.shape}")
    return beta * target + (1.0 - beta) * online


# -- trainers --------------------------------------------------------------

class TS2VecTrainer:
    """Hierarchical contrast between two overlapping crops of each window."""

    family = "ts2vec"

    def __init__(self, encoder: EncoderModel):
        self.encoder = encoder

    def parameters(self) -> list[dc.Tensor]:
        return self.encoder.parameters()

    def loss(self, batch: np.ndarray, rng: np.random.Generator) -> dc.Tensor:
        w = batch.shape[1] // 2
        crop = random_crop_pair(batch, rng, w, require_overlap=True)
        lo, hi = crop.overlap
        z1 = self.encoder.forward_sequence(crop.view1, training=True, rng=rng)
        z2 = self.encoder.forward_sequence(crop.view2, training=True, rng=rng)
        return hierarchical_loss(z1[:, lo - crop.start1:hi - crop.start1],
                                 z2[:, lo - crop.start2:hi - crop.start2])

    def after_step(self) -> None:
        pass


class BYOLTrainer:
    """Online encoder + projection + prediction chasing an EMA target."""

    family = "byol"

    def __init__(self, encoder: EncoderModel, proj_dims: int = 64, head_hidden: int = 128,
                 beta: float = 0.996, seed: int = 0):
        if not 0.0 < beta < 1.0:
            raise ContractError(f"EMA rate must lie in (0, 1), got {beta}")
        self.encoder = encoder
        self.beta = beta
        out = encoder.output_dims
        self.projector = MLP(out, head_hidden, proj_dims, seed=seed + 1, prefix="projector")
        self.predictor = MLP(proj_dims, head_hidden, proj_dims, seed=seed + 2, prefix="predictor")
        self.target = encoder.copy()
        self.target_projector = self.projector.copy()

    def parameters(self) -> list[dc.Tensor]:
        return self.encoder.parameters() + self.projector.parameters() + self.predictor.parameters()

    def _online(self, view, rng) -> dc.Tensor:
        return self.predictor(self.projector(self.encoder.forward_vector(view, training=True, rng=rng)))

    def _target(self, view) -> np.ndarray:
        return self.target_projector(self.target.forward_vector(view)).data

    def loss(self, batch: np.ndarray, rng: np.random.Generator) -> dc.Tensor:
        crop = random_crop_pair(batch, rng, batch.shape[1] // 2)
        p1, p2 = self._online(crop.view1, rng), self._online(crop.view2, rng)
        t1, t2 = self._target(crop.view1), self._target(crop.view2)
        return (byol_loss(p1, t2) + byol_loss(p2, t1)) * 0.5

    def after_step(self) -> None:
        pairs = list(zip(self.target.parameters(), self.encoder.parameters()))
        pairs += zip(self.target_projector.parameters(), self.projector.parameters())
        for tgt, src in pairs:
            tgt.data = ema_update(tgt.data, src.data, self.beta)


# -- training loop ---------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    max_steps: int | None = None
    final_iterations: int = 1000


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    max_layer_norm: float


@dataclass
class TrainResult:
    model: EncoderModel
    history: list[StepRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    validation: list[float] = field(default_factory=list)


def sliding_windows(X: np.ndarray, length: int, stride: int = 1) -> np.ndarray:
    """(N, length, D) stack of windows X[s:s+length] for s = 0, stride, ..."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < length:
        raise ContractError(f"series of length {X.shape[0]} is shorter than window {length}")
    view = np.lib.stride_tricks.sliding_window_view(X, length, axis=0)[::stride]
    return np.ascontiguousarray(np.swapaxes(view, 1, 2))


def train(trainer, windows: np.ndarray, epochs: int, config: TrainConfig | None = None,
          validate: Callable[[EncoderModel], float] | None = None) -> TrainResult:
    """Optimise ``trainer`` on (N, 2w, D) windows with Adam.

    ``validate`` (higher is better) runs after each epoch; the best epoch's
    weights are kept.  A non-finite loss raises :class:`TrainingError`
    naming the step.
    """
    config = config or TrainConfig()
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1] < 2:
        raise DimensionError(f"expected (N, 2w, D) windows, got {windows.shape}")
    rng = np.random.default_rng(config.seed)
    model = trainer.encoder
    result = TrainResult(model=model)
    if epochs <= 0:
        return result
    opt = dc.Adam(trainer.parameters(), lr=config.lr)
    n = len(windows)
    step = 0
    best_state = None
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b in range(0, n, config.batch_size):
            batch = windows[order[b:b + config.batch_size]]
            opt.zero_grad()
            loss = trainer.loss(batch, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch}, "
                                    f"batch starting at {b})")
            dc.backward(loss, opt.params)
            # weights about to be updated were projected at the end of the last step
            pre_norm = max((s.last_estimate for s in model.sn_states.values()), default=0.0)
            opt.step()
            model.project()
            trainer.after_step()
            result.history.append(StepRecord(step, epoch, value, pre_norm))
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        if validate is not None:
            score = float(validate(model))
            result.validation.append(score)
            if result.best_score is None or score > result.best_score:
                result.best_score, result.best_epoch = score, epoch
                best_state = model.state_arrays()
            log.info("epoch %d validation %.6g", epoch, score)
        if config.max_steps is not None and step >= config.max_steps:
            break
    if best_state is not None:
        model.load_arrays(best_state)
    model.project(n_iter=config.final_iterations, tol=1e-13)
    return result


def history_csv(history: list[StepRecord]) -> str:
    lines = ["step,loss,max_layer_norm"]
    lines += [f"{r.step},{r.loss:.17g},{r.max_layer_norm:.17g}" for r in history]
    return "\n".join(lines) + "\n"
