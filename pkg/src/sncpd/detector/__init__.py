"""Windowed change-point detection, evaluation and experiments."""

from .evaluation import (F1Report, SweepResult, evaluable_labels, evaluate_trace, margin_f1,
                         threshold_sweep)
from .experiments import (DynamicsResult, PowerResult, RejectionResult, binomial_upper,
                          dynamics_experiment, loglog_slope, mmd_power_experiment, rejection_curve)
from .pipeline import (DetectionTrace, Scorer, WindowPair, make_window_pairs, pair_embeddings,
                       score_pairs)

__all__ = [
    "F1Report", "SweepResult", "evaluable_labels", "evaluate_trace", "margin_f1", "threshold_sweep",
    "DynamicsResult", "PowerResult", "RejectionResult", "binomial_upper", "dynamics_experiment",
    "loglog_slope", "mmd_power_experiment", "rejection_curve",
    "DetectionTrace", "Scorer", "WindowPair", "make_window_pairs", "pair_embeddings", "score_pairs",
]
