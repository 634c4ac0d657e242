"""End-to-end steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import (SplitSpec, TimeSeries, gen_gaussian_mean_shift, load_csv, normalize_to_sphere,
                   random_change_points, split)
from .detector import (DetectionTrace, F1Report, Scorer, evaluate_trace, make_window_pairs,
                       threshold_sweep)
from .encoders import (BYOLTrainer, EncoderConfig, EncoderModel, TrainConfig, TrainResult,
                       TS2VecTrainer, sliding_windows, train)
from .errors import ValidationError
from .specnorm import SNConfig


def load_series(cfg: RunConfig) -> TimeSeries:
    if cfg.data == "synthetic":
        cps = random_change_points(cfg.gen_length, cfg.gen_cps, cfg.gen_min_gap, cfg.seed)
        series = gen_gaussian_mean_shift(cfg.gen_channels, cfg.gen_length, cps, cfg.gen_delta, cfg.seed)
    else:
        series = load_csv(cfg.data)
    if cfg.sphere:
        series = TimeSeries(normalize_to_sphere(series.values), series.labels, series.name)
    return series


def splits(cfg: RunConfig, series: TimeSeries | None = None):
    series = load_series(cfg) if series is None else series
    return split(series, SplitSpec(*cfg.split))


def build_encoder(cfg: RunConfig, input_dims: int) -> EncoderModel:
    return EncoderModel(EncoderConfig(
        input_dims=input_dims, hidden_dims=cfg.hidden, output_dims=cfg.code_size, depth=cfg.depth,
        kernel_size=cfg.kernel_size, activation=cfg.activation, dropout=cfg.dropout, head=True,
        sn=SNConfig(c=cfg.cap_c) if cfg.sn else None, seed=cfg.seed,
        family="byol" if cfg.byol else "ts2vec"))


def make_trainer(cfg: RunConfig, model: EncoderModel):
    return BYOLTrainer(model, seed=cfg.seed) if cfg.byol else TS2VecTrainer(model)


def score_series(cfg: RunConfig, model: EncoderModel, series: TimeSeries,
                 sigma: float | None = None) -> DetectionTrace:
    pairs = make_window_pairs(series.values, cfg.window, cfg.stride)
    return Scorer(model, cfg.statistic, sigma).score(pairs, name=series.name)


def validation_f1(cfg: RunConfig, model: EncoderModel, val: TimeSeries) -> float:
    trace = score_series(cfg, model, val)
    return threshold_sweep(trace, val.labels, cfg.margins[0]).f1


def fit(cfg: RunConfig, parts=None) -> tuple[EncoderModel, TrainResult]:
    """Train on the train segment; keep the epoch with the best validation F1."""
    train_s, val_s, _ = splits(cfg) if parts is None else parts
    windows = sliding_windows(train_s.values, 2 * cfg.window, cfg.train_stride)
    model = build_encoder(cfg, train_s.channels)
    trainer = make_trainer(cfg, model)
    validate = None
    if val_s.length >= 2 * cfg.window and val_s.labels.size:
        validate = lambda m: validation_f1(cfg, m, val_s)  # noqa: E731
    tcfg = TrainConfig(batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
                       max_steps=cfg.max_steps or None)
    result = train(trainer, windows, cfg.epochs, tcfg, validate)
    return model, result


@dataclass
class Detection:
    val: DetectionTrace
    test: DetectionTrace
    thresholds: dict[int, float]
    reports: dict[int, F1Report]


def detect_and_evaluate(cfg: RunConfig, model: EncoderModel, parts=None) -> Detection:
    """Score val and test; tune one threshold per margin on val, report test F1."""
    _, val_s, test_s = splits(cfg) if parts is None else parts
    scorer = Scorer(model, cfg.statistic)
    val_trace = scorer.score(make_window_pairs(val_s.values, cfg.window, cfg.stride), val_s.name)
    test_trace = scorer.score(make_window_pairs(test_s.values, cfg.window, cfg.stride), test_s.name)
    thresholds, reports = {}, {}
    for margin in cfg.margins:
        try:
            thresholds[margin] = threshold_sweep(val_trace, val_s.labels, margin).threshold
        except ValidationError:
            thresholds[margin] = float(np.max(val_trace.statistic)) + 1.0
        reports[margin] = evaluate_trace(test_trace.with_threshold(thresholds[margin]), test_s.labels, margin)
    return Detection(val_trace.with_threshold(thresholds[cfg.margins[0]]),
                     test_trace.with_threshold(thresholds[cfg.margins[0]]), thresholds, reports)
