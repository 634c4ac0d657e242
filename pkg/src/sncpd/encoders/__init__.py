"""Residual encoders and their self-supervised training."""

from .checkpoint import from_bytes, load, save, to_bytes
from .losses import byol_loss, hierarchical_levels, hierarchical_loss, instance_loss, temporal_loss
from .model import MLP, EncoderConfig, EncoderModel
from .training import (BYOLTrainer, CropPair, StepRecord, TrainConfig, TrainResult, TS2VecTrainer,
                       ema_update, history_csv, random_crop_pair, sliding_windows, train)

__all__ = [
    "EncoderConfig", "EncoderModel", "MLP", "load", "save", "to_bytes", "from_bytes",
    "instance_loss", "temporal_loss", "hierarchical_levels", "hierarchical_loss", "byol_loss",
    "BYOLTrainer", "TS2VecTrainer", "CropPair", "StepRecord", "TrainConfig", "TrainResult",
    "ema_update", "history_csv", "random_crop_pair", "sliding_windows", "train",
]
