"""Image enhancement and normalization for CT slices.

Gaussian smoothing, Perona-Malik anisotropic diffusion with the rational
diffusivity ``1 / (1 + (g/s)^2)``, bilinear resampling, 8-bit min-max
quantization and dataset standardization with training-split statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class GaussianParams:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"Gaussian sigma must be > 0, got {self.sigma}")

    @property
    def radius(self) -> int:
        return math.ceil(3.0 * self.sigma)


@dataclass(frozen=True)
class DiffusionParams:
    s: float = 15.0
    lam: float = 0.25
    iterations: int = 10

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"corner sensitivity s must be > 0, got {self.s}")
        if not 0.0 < self.lam <= 0.25:
            raise ValueError(f"time step lambda must lie in (0, 0.25], got {self.lam}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


def gaussian_kernel(p: GaussianParams, normalize: bool = True) -> np.ndarray:
    """(2r+1) x (2r+1) samples of the 2-D Gaussian density, r = ceil(3 sigma).

    With ``normalize=False`` the raw density values are returned (the centre
    equals 1 / (2 pi sigma^2)); otherwise they are rescaled to sum to 1.
    """
    r = p.radius
    off = np.arange(-r, r + 1, dtype=np.float64)
    sq = off[:, None] ** 2 + off[None, :] ** 2
    k = np.exp(-sq / (2.0 * p.sigma ** 2)) / (2.0 * math.pi * p.sigma ** 2)
    return k / k.sum() if normalize else k


def gaussian_smooth(img: np.ndarray, p: GaussianParams) -> np.ndarray:
    """Convolve with :func:`gaussian_kernel` using mirrored (half-sample) borders."""
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("cannot smooth an empty image")
    return ndimage.correlate(img, gaussian_kernel(p), mode="reflect")


def diffusivity(g, s: float):
    """Edge-stopping function 1 / (1 + (g / s)^2)."""
    if not s > 0:
        raise ValueError(f"corner sensitivity s must be > 0, got {s}")
    g = np.asarray(g, dtype=np.float64)
    return 1.0 / (1.0 + (g / s) ** 2)


def anisotropic_diffuse(img: np.ndarray, p: DiffusionParams) -> np.ndarray:
    """Explicit 4-neighbour Perona-Malik iteration with replicated edges.

    Each sweep adds ``lam * sum_k f(|d_k|) d_k`` where ``d_k`` is the
    difference toward neighbour ``k``.  Border differences toward the
    replicated pixel vanish, so total intensity is conserved.
    """
    u = np.array(img, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"anisotropic_diffuse expects a 2-D image, got shape {u.shape}")
    for _ in range(p.iterations):
        # flux across each interior edge, shared by the two pixels it joins
        dv = u[1:, :] - u[:-1, :]
        dh = u[:, 1:] - u[:, :-1]
        fv = diffusivity(np.abs(dv), p.s) * dv
        fh = diffusivity(np.abs(dh), p.s) * dh
        update = np.zeros_like(u)
        update[:-1, :] += fv
        update[1:, :] -= fv
        update[:, :-1] += fh
        update[:, 1:] -= fh
        u += p.lam * update
    return u


def resize_slice(img: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Bilinear resampling with half-pixel-centred sample positions."""
    img = np.asarray(img, dtype=np.float64)
    th, tw = (int(v) for v in shape)
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {th}x{tw}")
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"resize_slice expects a non-empty 2-D image, got shape {img.shape}")
    h, w = img.shape
    if (h, w) == (th, tw):
        return img.copy()

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, th)
    c0, c1, fc = axis_weights(w, tw)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def resize_mask(mask: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return (resize_slice(np.asarray(mask, dtype=np.float64), shape) >= 0.5).astype(np.uint8)


def quantize_u8(img: np.ndarray) -> tuple:
    """Min-max map to 0..255 with round-half-away; returns (uint8 image, (min, max))."""
    v = np.asarray(img, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("cannot quantize non-finite values")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8), (lo, hi)
    scaled = 255.0 * (v - lo) / (hi - lo)
    return np.floor(scaled + 0.5).astype(np.uint8), (lo, hi)


def compute_norm_stats(train_slices: Sequence[np.ndarray]) -> NormStats:
    if len(train_slices) == 0:
        raise ValueError("normalization needs a non-empty training set")
    pixels = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in train_slices])
    return NormStats(float(pixels.mean()), float(pixels.std()))


def apply_norm(img: np.ndarray, stats: NormStats) -> np.ndarray:
    out = np.asarray(img, dtype=np.float64) - stats.mean
    if stats.std >= 1e-12:
        out /= stats.std
    return out


def normalize_stack(train_slices: Sequence[np.ndarray], other_slices: Sequence[np.ndarray] = ()) -> tuple:
    """Standardize every slice with mean/std taken from the training slices only.

    Returns ``(train_normalized, other_normalized, NormStats)``.  A (near-)zero
    training std only subtracts the mean.
    """
    stats = compute_norm_stats(train_slices)
    return ([apply_norm(s, stats) for s in train_slices],
            [apply_norm(s, stats) for s in other_slices], stats)


# --------------------------------------------------------------------------
# configurable per-slice pipeline

STEP_NAMES = ("resize", "quantize", "gaussian", "diffusion")


def validate_steps(steps: Sequence[dict]) -> list:
    """Normalize a list of ``{"op": name, ...params}`` step dicts."""
    out = []
    for step in steps:
        step = dict(step)
        op = step.get("op")
        if op == "normalize":
            continue  # applied separately, needs the training split
        if op not in STEP_NAMES:
            raise ValueError(f"unknown preprocessing op {op!r}; expected one of {STEP_NAMES + ('normalize',)}")
        if op == "gaussian":
            GaussianParams(float(step.get("sigma", 1.0)))
        elif op == "diffusion":
            DiffusionParams(float(step.get("s", 15.0)), float(step.get("lambda", 0.25)),
                            int(step.get("iterations", 10)))
        elif op == "resize":
            if "height" not in step or "width" not in step:
                raise ValueError("resize step needs 'height' and 'width'")
        out.append(step)
    return out


def wants_normalize(steps: Sequence[dict]) -> bool:
    return any(dict(s).get("op") == "normalize" for s in steps)


def preprocess_volume_slices(slices: np.ndarray, steps: Sequence[dict]) -> np.ndarray:
    """Run the non-normalizing steps over an (n, H, W) stack, in order.

    ``quantize`` uses the min/max of the whole stack (one volume), the other
    steps work slice by slice.
    """
    out = np.asarray(slices, dtype=np.float64)
    for step in validate_steps(steps):
        op = step["op"]
        if op == "resize":
            out = np.stack([resize_slice(s, (step["height"], step["width"])) for s in out])
        elif op == "quantize":
            out = quantize_u8(out)[0].astype(np.float64)
        elif op == "gaussian":
            p = GaussianParams(float(step.get("sigma", 1.0)))
            out = np.stack([gaussian_smooth(s, p) for s in out])
        elif op == "diffusion":
            p = DiffusionParams(float(step.get("s", 15.0)), float(step.get("lambda", 0.25)),
                                int(step.get("iterations", 10)))
            out = np.stack([anisotropic_diffuse(s, p) for s in out])
    return out


def target_size(steps: Sequence[dict], native: tuple) -> tuple:
    size = tuple(native)
    for step in steps:
        if dict(step).get("op") == "resize":
            size = (int(step["height"]), int(step["width"]))
    return size
