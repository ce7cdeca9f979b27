# %% [markdown]
# # Filters, metrics and the paired t-test
#
# A walk through the building blocks on one synthetic patient: smoothing,
# edge-preserving diffusion, overlap metrics and the Hausdorff distance.
# Run cell by cell in an editor that understands `# %%`, or as a script.

# %%
import math

import numpy as np

from liverseg.metrics import confusion, accuracy, dice, hausdorff
from liverseg.phantom import PhantomConfig, generate_phantom
from liverseg.preprocess import (
    DiffusionParams,
    GaussianParams,
    anisotropic_diffuse,
    gaussian_kernel,
    gaussian_smooth,
    quantize_u8,
)
from liverseg.stats import p_value, paired_t_test_arrays, sem
from liverseg.volume_io import slice_volume

# %% [markdown]
# ## One phantom, one sagittal slice

# %%
ct, mask = generate_phantom(PhantomConfig(), patient=0)
ct_slices = slice_volume(ct, "sagittal").slices
mask_slices = slice_volume(mask, "sagittal").slices
k = int(np.argmax(mask_slices.sum(axis=(1, 2))))
img = quantize_u8(ct_slices[k])[0].astype(float)
truth = mask_slices[k].astype(np.uint8)
print(f"volume {ct.dims}, slice {k} of {len(ct_slices)}, liver pixels {truth.sum()}")

# %% [markdown]
# ## Gaussian kernel and smoothing

# %%
kern = gaussian_kernel(GaussianParams(1.0))
print(kern.shape, kern.sum(), kern[3, 4] / kern[3, 3], math.exp(-0.5))
smooth = gaussian_smooth(img, GaussianParams(1.0))
print("std before/after smoothing:", img.std().round(3), smooth.std().round(3))

# %% [markdown]
# ## Anisotropic diffusion keeps the organ edge

# %%
diffused = anisotropic_diffuse(smooth, DiffusionParams(s=15.0, lam=0.25, iterations=10))
inside, outside = truth == 1, truth == 0
for name, arr in (("raw", img), ("gaussian", smooth), ("diffused", diffused)):
    contrast = arr[inside].mean() - arr[outside].mean()
    print(f"{name:9s} liver-vs-rest contrast {contrast:7.2f}  in-organ std {arr[inside].std():6.2f}")

# %% [markdown]
# ## Overlap and boundary metrics
#
# A crude threshold segmentation of the diffused slice against the truth.

# %%
lo, hi = np.percentile(diffused[inside], [5, 95])
pred = ((diffused >= lo) & (diffused <= hi)).astype(np.uint8)
c = confusion(pred, truth)
print(c, f"accuracy {accuracy(c):.4f}  dice {dice(c):.4f}  hausdorff {hausdorff(pred, truth):.2f}px")

# %% [markdown]
# ## Paired t-test arithmetic for a reference U-Net vs SegNet comparison

# %%
print("SEM:", round(sem(1.614765, 26), 6), round(sem(1.567370, 26), 6))
print("one-sided p at t=2.079617, df=25:", round(p_value(2.079617, 25, "one_sided_less"), 5))
print("effect size:", round(2.079617 / math.sqrt(26), 3))

rng = np.random.default_rng(0)
a = rng.normal(5.58, 1.6, 26)
b = a - rng.normal(0.06, 0.15, 26)
res = paired_t_test_arrays(a, b)
print(f"synthetic pairs: t={res.t:.4f} df={res.df} p={res.p:.4g} d={res.cohen_d:.3f} reject={res.reject}")
