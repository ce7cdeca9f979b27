"""Overlap and boundary-distance metrics for binary segmentation masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def as_binary(mask, what: str = "mask") -> np.ndarray:
    """Return ``mask`` as a bool array, rejecting anything but 0/1 values."""
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    ok = (arr == 0) | (arr == 1)
    if not ok.all():
        bad = arr[~ok].reshape(-1)[0]
        raise ValueError(f"{what} must be binary (0/1), found value {bad!r}")
    return arr.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    """Per-pixel tally with liver (1) as the positive class."""
    p = as_binary(pred, "prediction")
    t = as_binary(truth, "ground truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: prediction {p.shape}, truth {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total <= 0:
        raise ValueError("accuracy is undefined for an empty mask")
    return (c.tp + c.tn) / c.total


def dice(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); two empty masks agree perfectly (1.0)."""
    den = 2 * c.tp + c.fp + c.fn
    if den == 0:
        return 1.0
    return 2 * c.tp / den


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background face-neighbor.

    Positions outside the array count as background, so foreground touching
    the border is boundary.
    """
    m = as_binary(mask)
    padded = np.pad(m, 1, constant_values=False)
    core = tuple(slice(1, -1) for _ in range(m.ndim))
    interior = m.copy()
    for axis in range(m.ndim):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[core]
    return m & ~interior


def directed_hausdorff(a_points: np.ndarray, b_points: np.ndarray) -> float:
    """max over a of min over b of the Euclidean distance."""
    dist, _ = cKDTree(b_points).query(a_points, k=1)
    return float(dist.max())


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance (pixel units) between mask boundaries."""
    ba, bb = boundary(a), boundary(b)
    if ba.shape != bb.shape:
        raise ValueError(f"mask shapes differ: {ba.shape} vs {bb.shape}")
    pa, pb = np.argwhere(ba), np.argwhere(bb)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("Hausdorff distance is undefined for empty set")
    return max(directed_hausdorff(pa, pb), directed_hausdorff(pb, pa))
