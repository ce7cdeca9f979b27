"""Training losses on sigmoid probability maps."""

from __future__ import annotations

import numpy as np

from liverseg.autodiff import ShapeError, Tensor, _record

BCE_CLAMP = 1e-7
DICE_SMOOTH = 1.0


def _check(pred: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction shape {pred.shape} != target shape {target.shape}")
    return target


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    t = _check(pred, target)
    n = t.size

    def forward(p):
        p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
        return np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())

    raw = pred.data
    inside = (raw >= BCE_CLAMP) & (raw <= 1.0 - BCE_CLAMP)
    p = np.clip(raw, BCE_CLAMP, 1.0 - BCE_CLAMP)

    def backward(g):
        return (float(g) * inside * (-t / p + (1.0 - t) / (1.0 - p)) / n,)

    return _record("bce", forward(raw), (pred,), forward, backward)


def soft_dice(pred: Tensor, target) -> Tensor:
    """1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1), over the whole batch."""
    t = _check(pred, target)

    def forward(p):
        return np.asarray(1.0 - (2.0 * (p * t).sum() + DICE_SMOOTH) / (p.sum() + t.sum() + DICE_SMOOTH))

    p = pred.data
    num = 2.0 * (p * t).sum() + DICE_SMOOTH
    den = p.sum() + t.sum() + DICE_SMOOTH

    def backward(g):
        return (float(g) * -(2.0 * t * den - num) / den ** 2,)

    return _record("soft_dice", forward(p), (pred,), forward, backward)


LOSSES = {"bce": bce, "soft_dice": soft_dice}


def compute_loss(pred: Tensor, target, kind: str = "bce") -> Tensor:
    try:
        fn = LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}; expected one of {sorted(LOSSES)}") from None
    return fn(pred, target)
