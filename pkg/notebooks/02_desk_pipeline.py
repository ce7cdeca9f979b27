# %% [markdown]
# # Desk-scale pipeline: phantoms to t-test
#
# Trains a small U-Net and SegNet on seeded phantoms, predicts the two
# held-out patients and compares their Hausdorff distances with a paired
# one-sided t-test. Takes a couple of minutes on one CPU core.

# %%
import tempfile
from pathlib import Path

import numpy as np

from liverseg.phantom import PhantomConfig, generate_phantoms
from liverseg.runner import compare_models, parse_config, run_all
from liverseg.runner.experiment import read_csv

out = Path(tempfile.mkdtemp(prefix="liverseg-"))
raw = {
    "seed": 0,
    "data": {"phantom": {"dims": [64, 64, 32], "count": 6}},
    "holdout": 2,
    "cases": [
        {"case": family, "model": {"family": family, "depth": 2, "base_channels": 8},
         "train": {"epochs": 6, "batch_size": 8}}
        for family in ("unet", "segnet")
    ],
}
configs = parse_config(raw, out_override=out)

# %% [markdown]
# ## Train both cases

# %%
reports, failures = run_all(configs)
for r in reports:
    print(f"{r.case:7s} epochs {len(r.epochs)}  val dice {r.final_validation_dice:.4f}  "
          f"train {r.train_seconds:.0f}s  held-out dice {r.holdout_dice}")
print((out / "final.csv").read_text())

# %% [markdown]
# ## Learning curves

# %%
for case in ("unet", "segnet"):
    print(case)
    for row in read_csv(out / case / "curves.csv"):
        print("  epoch {epoch}: train dice {train_dice:.6s}  val dice {val_dice:.6s}".format(**row))

# %% [markdown]
# ## Compare the held-out predictions
#
# Each non-empty sagittal slice of each held-out patient is one paired case.

# %%
from liverseg.volume_io import read_nifti

patients = generate_phantoms(configs[0].data.phantom)
held = [f"case{i:03d}" for i in range(4, 6)]
truth = [patients[i][1].voxels for i in range(4, 6)]
preds = {c: [read_nifti(out / c / "predictions" / f"{h}_pred.nii").voxels for h in held]
         for c in ("unet", "segnet")}
res = compare_models(preds["unet"], preds["segnet"], truth, out_dir=out, labels=("unet", "segnet"))
print((out / "ttest.csv").read_text())
print(f"overlays for visual inspection: {out / 'unet' / 'overlays'}")
