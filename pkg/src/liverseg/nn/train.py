"""Mini-batch training with Adam, per-epoch metrics and early stopping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from liverseg.autodiff import Tensor, no_grad
from liverseg.metrics import accuracy, confusion, dice
from liverseg.nn.losses import LOSSES, compute_loss
from liverseg.nn.models import Model
from liverseg.nn.optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    validation_split: float = 0.2
    seed: int = 0
    patience: int = 0
    l2_weight: float = 0.0
    loss: str = "bce"
    lr: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.validation_split < 1.0:
            raise ValueError(f"validation_split must lie in (0, 1), got {self.validation_split}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {sorted(LOSSES)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_accuracy: float
    val_accuracy: float
    train_dice: float
    val_dice: float
    wall_seconds: float
    train_loss: float = float("nan")


def split_indices(n: int, validation_split: float, seed: int) -> tuple:
    """Random (train, validation) index split; validation gets round(n * split)."""
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    n_val = int(math.floor(n * validation_split + 0.5))
    if n_val < 1 or n_val > n - 1:
        raise ValueError(f"validation split {validation_split} of {n} samples leaves an empty side")
    perm = np.random.default_rng([seed, 0]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class EarlyStopping:
    """Track the best validation Dice; signal a stop after ``patience``
    consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch: Optional[int] = None
        self.best_state: Optional[dict] = None
        self.wait = 0

    def update(self, epoch: int, score: float, snapshot: Callable[[], dict]) -> bool:
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.best_state = snapshot()
            self.wait = 0
            return False
        self.wait += 1
        return self.patience > 0 and self.wait >= self.patience


def _as_nchw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 3 else x


def predict_proba(model: Model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-mode probabilities for an (N, H, W) or (N, 1, H, W) stack."""
    x = _as_nchw(images)
    out = np.empty_like(x)
    with no_grad():
        for s in range(0, len(x), batch_size):
            out[s:s + batch_size] = model(Tensor(x[s:s + batch_size]), training=False).data
    return out


def evaluate(model: Model, images: np.ndarray, masks: np.ndarray, threshold: float = 0.5,
             batch_size: int = 32) -> tuple:
    """(accuracy, dice) over the pooled pixels of a stack."""
    prob = predict_proba(model, images, batch_size)
    counts = confusion(prob >= threshold, _as_nchw(masks) > 0.5)
    return accuracy(counts), dice(counts)


def train_model(model: Model, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
                threshold: float = 0.5, evaluate_fn: Optional[Callable] = None,
                on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> tuple:
    """Train ``model`` in place and return ``(model, [EpochRecord, ...])``.

    ``evaluate_fn(model, images, masks)`` -> (accuracy, dice) replaces the
    default pooled-pixel evaluation; it exists for testing the stopping rule.
    With ``patience`` > 0 the weights with the best validation Dice are
    restored before returning.
    """
    x = _as_nchw(images)
    y = (_as_nchw(masks) > 0.5).astype(np.float64)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if x.shape != y.shape:
        raise ValueError(f"images {x.shape} and masks {y.shape} differ in shape")
    train_idx, val_idx = split_indices(len(x), cfg.validation_split, cfg.seed)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    evaluate_fn = evaluate_fn or (lambda m, xi, yi: evaluate(m, xi, yi, threshold))

    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    records: list = []

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(train_idx)
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            pred = model(Tensor(x[idx]), training=True)
            loss = compute_loss(pred, y[idx], cfg.loss)
            if not loss.is_finite():
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.zero_grad()
            loss.backward()
            try:
                adam_step(params, None, state, cfg.l2_weight)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(loss.item())

        tr_acc, tr_dice = evaluate_fn(model, x[train_idx], y[train_idx])
        va_acc, va_dice = evaluate_fn(model, x[val_idx], y[val_idx])
        rec = EpochRecord(epoch, tr_acc, va_acc, tr_dice, va_dice,
                          time.perf_counter() - t0, float(np.mean(losses)))
        records.append(rec)
        log.info("epoch %d loss %.4f acc %.4f/%.4f dice %.4f/%.4f (%.1fs)", epoch,
                 rec.train_loss, tr_acc, va_acc, tr_dice, va_dice, rec.wall_seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.update(epoch, va_dice, model.state_dict):
            log.info("early stop after epoch %d; best val dice %.4f at epoch %d",
                     epoch, stopper.best_score, stopper.best_epoch)
            break

    if cfg.patience > 0 and stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    return model, records
