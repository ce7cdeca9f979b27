"""Segmentation networks, losses, optimizer and training loop."""

from liverseg.nn.losses import bce, compute_loss, soft_dice
from liverseg.nn.models import FAMILIES, Model, ModelConfig, build_model
from liverseg.nn.optim import AdamState, adam_step
from liverseg.nn.train import (
    EarlyStopping,
    EpochRecord,
    TrainConfig,
    TrainingError,
    evaluate,
    predict_proba,
    split_indices,
    train_model,
)

__all__ = [
    "FAMILIES", "Model", "ModelConfig", "build_model",
    "AdamState", "adam_step", "bce", "soft_dice", "compute_loss",
    "TrainConfig", "EpochRecord", "EarlyStopping", "TrainingError",
    "train_model", "predict_proba", "evaluate", "split_indices",
]
