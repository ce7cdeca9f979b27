"""Seeded synthetic CT-like volumes with an ellipsoidal "liver" and its mask.

Every random draw comes from a Philox stream keyed by (seed, patient,
purpose), so patient ``i`` is identical no matter how many patients are
generated.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from liverseg.volume_io import Volume, write_nifti

_PURPOSE = {"liver": 1, "distractors": 2, "background": 3, "noise": 4}


@dataclass
class PhantomConfig:
    dims: tuple = (64, 64, 32)
    count: int = 6
    center_range: tuple = (0.4, 0.6)
    radius_range: tuple = (0.18, 0.28)
    max_rotation: float = math.pi / 6  # in-plane (X-Y) rotation bound, radians
    organ_band: tuple = (0.55, 0.65)
    background_band: tuple = (0.20, 0.35)
    distractor_band: tuple = (0.85, 1.0)
    distractor_count: tuple = (2, 4)
    distractor_radius_range: tuple = (0.06, 0.12)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        for name in ("center_range", "radius_range", "organ_band", "background_band",
                     "distractor_band", "distractor_radius_range", "distractor_count"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive extents, got {self.dims}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        for name in ("organ_band", "background_band", "distractor_band"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        lo_c, hi_c = self.center_range
        lo_r, hi_r = self.radius_range
        if not (0 < lo_c <= hi_c < 1 and 0 < lo_r <= hi_r):
            raise ValueError("center_range/radius_range must be increasing fractions in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        lo_k, hi_k = self.distractor_count
        if not 0 <= lo_k <= hi_k:
            raise ValueError(f"distractor_count must be 0 <= lo <= hi, got {self.distractor_count}")
        # the rotated in-plane extent is bounded by the larger in-plane radius
        x, y, z = self.dims
        r_inplane = hi_r * max(x, y)
        for extent, radius in ((x, r_inplane), (y, r_inplane), (z, hi_r * z)):
            if lo_c * (extent - 1) - radius < 0 or hi_c * (extent - 1) + radius > extent - 1:
                raise ValueError(
                    f"infeasible geometry: radius up to {radius:.1f} voxels with centre range "
                    f"{self.center_range} leaves the volume along an extent of {extent}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def keyed_rng(seed: int, patient: int, purpose: str) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(patient, _PURPOSE[purpose]))
    return np.random.Generator(np.random.Philox(ss))


def _grid(dims):
    return np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")


def ellipsoid_mask(dims, center, radii, angle: float) -> np.ndarray:
    """Voxels whose rotated-frame coordinates satisfy sum(((p - c) / r)^2) <= 1.

    ``angle`` rotates the ellipsoid about the Z axis.
    """
    gx, gy, gz = _grid(dims)
    dx, dy, dz = gx - center[0], gy - center[1], gz - center[2]
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 + (dz / radii[2]) ** 2 <= 1.0


def liver_geometry(cfg: PhantomConfig, patient: int) -> tuple:
    rng = keyed_rng(cfg.seed, patient, "liver")
    dims = np.asarray(cfg.dims, dtype=np.float64)
    center = rng.uniform(*cfg.center_range, size=3) * (dims - 1)
    radii = rng.uniform(*cfg.radius_range, size=3) * dims
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    intensity = rng.uniform(*cfg.organ_band)
    return center, radii, angle, intensity


def _background(cfg: PhantomConfig, patient: int) -> np.ndarray:
    rng = keyed_rng(cfg.seed, patient, "background")
    field = ndimage.gaussian_filter(rng.random(cfg.dims), sigma=4.0, mode="wrap")
    span = field.max() - field.min()
    field = (field - field.min()) / span if span > 0 else np.zeros(cfg.dims)
    lo, hi = cfg.background_band
    return lo + (hi - lo) * field


def generate_phantom(cfg: PhantomConfig, patient: int) -> tuple:
    """(CT volume float32, liver mask uint8) for one patient index."""
    vol = _background(cfg, patient)
    dims = np.asarray(cfg.dims, dtype=np.float64)

    rng = keyed_rng(cfg.seed, patient, "distractors")
    k = int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))
    for _ in range(k):
        c = rng.uniform(0.15, 0.85, size=3) * (dims - 1)
        r = np.maximum(rng.uniform(*cfg.distractor_radius_range, size=3) * dims, 1.0)
        vol[ellipsoid_mask(cfg.dims, c, r, rng.uniform(-math.pi, math.pi))] = rng.uniform(*cfg.distractor_band)

    center, radii, angle, intensity = liver_geometry(cfg, patient)
    liver = ellipsoid_mask(cfg.dims, center, radii, angle)
    vol[liver] = intensity

    if cfg.noise_sigma > 0:
        vol = vol + keyed_rng(cfg.seed, patient, "noise").normal(0.0, cfg.noise_sigma, size=cfg.dims)
    name = f"case{patient:03d}"
    return (Volume(vol.astype(np.float32), (1.0, 1.0, 1.0), f"{name}_ct"),
            Volume(liver.astype(np.uint8), (1.0, 1.0, 1.0), f"{name}_mask"))


def generate_phantoms(cfg: PhantomConfig) -> list:
    return [generate_phantom(cfg, i) for i in range(cfg.count)]


def write_phantoms(cfg: PhantomConfig, out_dir) -> list:
    """Write ``caseNNN_ct.nii`` / ``caseNNN_mask.nii`` pairs; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (ct, mask) in enumerate(generate_phantoms(cfg)):
        ct_path, mask_path = out / f"case{i:03d}_ct.nii", out / f"case{i:03d}_mask.nii"
        write_nifti(ct, ct_path)
        write_nifti(mask, mask_path)
        paths.append((ct_path, mask_path))
    return paths
