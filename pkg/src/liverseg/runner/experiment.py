"""preprocess -> train -> predict -> evaluate -> compare.

Artifacts per run directory::

    final.csv                    one row per case (final train/val accuracy and Dice)
    <case>/curves.csv            one row per epoch actually run
    <case>/model.segb            checkpoint (see liverseg.runner.checkpoint)
    <case>/log.txt               human-readable log with timings
    <case>/holdout.csv           per held-out patient Dice, accuracy, Hausdorff
    <case>/predictions/<id>_pred.nii
    <case>/overlays/<id>/slice_NNN.ppm
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from liverseg import metrics
from liverseg.nn import build_model, split_indices, train_model
from liverseg.nn.models import check_divisible
from liverseg.nn.train import EpochRecord, TrainingError, predict_proba
from liverseg.phantom import generate_phantoms
from liverseg.preprocess import (
    NormStats,
    apply_norm,
    compute_norm_stats,
    preprocess_volume_slices,
    quantize_u8,
    resize_mask,
    target_size,
    wants_normalize,
)
from liverseg.runner.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from liverseg.runner.config import ExperimentConfig
from liverseg.stats import PairedSamples, TTestResult, paired_t_test
from liverseg.volume_io import Volume, read_nifti, restack, slice_volume, write_nifti, write_overlay

log = logging.getLogger(__name__)

FINAL_HEADER = ["case", "final_train_accuracy", "final_validation_accuracy",
                "final_train_dice", "final_validation_dice"]
CURVES_HEADER = ["epoch", "train_acc", "val_acc", "train_dice", "val_dice"]
HOLDOUT_HEADER = ["patient", "accuracy", "dice", "hausdorff"]
EVALUATE_HEADER = ["case", "accuracy", "dice", "hausdorff"]
PAIRS_HEADER = ["case", "hausdorff_a", "hausdorff_b"]
TTEST_HEADER = ["statistic", "group_a", "group_b"]


@dataclass
class CaseReport:
    case: str
    final_train_accuracy: float
    final_validation_accuracy: float
    final_train_dice: float
    final_validation_dice: float
    epochs: list = field(default_factory=list)
    hausdorff: dict = field(default_factory=dict)
    holdout_dice: dict = field(default_factory=dict)
    train_seconds: float = 0.0
    total_seconds: float = 0.0

    @classmethod
    def from_records(cls, case: str, records: Sequence[EpochRecord]) -> "CaseReport":
        last = records[-1]
        return cls(case, last.train_accuracy, last.val_accuracy, last.train_dice,
                   last.val_dice, list(records))

    def final_row(self) -> list:
        return [self.case, self.final_train_accuracy, self.final_validation_accuracy,
                self.final_train_dice, self.final_validation_dice]


# --------------------------------------------------------------------------
# CSV helpers


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# data


def case_id(path: Path) -> str:
    name = path.name
    for ext in (".gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
    for suffix in ("_ct", "_mask", "_pred"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def find_volumes(directory, suffix: str) -> dict:
    """``{case id: path}`` for ``<id>{suffix}.nii[.gz]`` files in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    found = {}
    for p in sorted(directory.iterdir()):
        if p.name.endswith((f"{suffix}.nii", f"{suffix}.nii.gz")):
            found[case_id(p)] = p
    return found


def load_patients(cfg: ExperimentConfig) -> list:
    """[(ct Volume, mask Volume)] ordered by patient id."""
    if cfg.data.phantom is not None:
        return generate_phantoms(cfg.data.phantom)
    cts = find_volumes(cfg.data.nifti_dir, "_ct")
    masks = find_volumes(cfg.data.nifti_dir, "_mask")
    if not cts:
        raise FileNotFoundError(f"no *_ct.nii[.gz] volumes in {cfg.data.nifti_dir}")
    missing = sorted(set(cts) - set(masks))
    if missing:
        raise FileNotFoundError(f"{cfg.data.nifti_dir}: no mask for case(s) {missing}")
    return [(read_nifti(cts[k]), read_nifti(masks[k])) for k in sorted(cts)]


def prepare_slices(ct: Volume, steps, axis: str) -> np.ndarray:
    return preprocess_volume_slices(slice_volume(ct, axis).slices, steps)


def prepare_masks(mask: Volume, steps, axis: str) -> np.ndarray:
    slices = slice_volume(mask, axis).slices
    size = target_size(steps, slices.shape[1:])
    if size != slices.shape[1:]:
        slices = np.stack([resize_mask(s, size) for s in slices])
    return (slices > 0).astype(np.float64)


# --------------------------------------------------------------------------
# experiment


def _case_logger(path: Path) -> logging.Handler:
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger("liverseg").addHandler(handler)
    return handler


def run_experiment(cfg: ExperimentConfig, patients: Optional[list] = None) -> CaseReport:
    """Train one case and write its curves, checkpoint, predictions and log."""
    t_start = time.perf_counter()
    out = cfg.case_dir
    out.mkdir(parents=True, exist_ok=True)
    handler = _case_logger(out / "log.txt")
    liverseg_logger = logging.getLogger("liverseg")
    prev_level = liverseg_logger.level
    if liverseg_logger.getEffectiveLevel() > logging.INFO:
        liverseg_logger.setLevel(logging.INFO)
    try:
        log.info("case %s: data %s, model %s, train %s", cfg.case, cfg.data.describe(),
                 cfg.model.to_dict(), cfg.train.to_dict())
        patients = patients if patients is not None else load_patients(cfg)
        if cfg.holdout >= len(patients):
            raise ValueError(f"holdout {cfg.holdout} leaves no training patients out of {len(patients)}")
        train_patients = patients[: len(patients) - cfg.holdout]
        held_out = patients[len(patients) - cfg.holdout:]

        images = np.concatenate([prepare_slices(ct, cfg.preprocess, cfg.axis) for ct, _ in train_patients])
        masks = np.concatenate([prepare_masks(m, cfg.preprocess, cfg.axis) for _, m in train_patients])
        log.info("%d training slices of %dx%d from %d patients", len(images), *images.shape[1:],
                 len(train_patients))

        norm = None
        if wants_normalize(cfg.preprocess):
            train_idx, _ = split_indices(len(images), cfg.train.validation_split, cfg.train.seed)
            norm = compute_norm_stats(list(images[train_idx]))
            images = apply_norm(images, norm)
            log.info("normalization: mean %.6g std %.6g", norm.mean, norm.std)

        check_divisible(images.shape[1:], cfg.model.depth)
        cfg.model.input_size = tuple(images.shape[1:])
        model = build_model(cfg.model)
        t0 = time.perf_counter()
        model, records = train_model(model, images, masks, cfg.train, threshold=cfg.threshold)
        train_seconds = time.perf_counter() - t0

        write_csv(out / "curves.csv", CURVES_HEADER,
                  [[r.epoch, r.train_accuracy, r.val_accuracy, r.train_dice, r.val_dice] for r in records])
        extras = {"preprocess": cfg.preprocess, "axis": cfg.axis, "threshold": cfg.threshold,
                  "norm": None if norm is None else {"mean": norm.mean, "std": norm.std},
                  "case": cfg.case}
        save_checkpoint(model, out / "model.segb", extras)

        report = CaseReport.from_records(cfg.case, records)
        report.train_seconds = train_seconds
        ckpt = Checkpoint(model, extras)
        rows = []
        for ct, truth in held_out:
            pid = case_id(Path(ct.source_id))
            t1 = time.perf_counter()
            pred = predict_volume(ckpt, ct, out, name=pid)
            c = metrics.confusion(pred.voxels, truth.voxels > 0)
            hd = (metrics.hausdorff(pred.voxels, truth.voxels > 0)
                  if pred.voxels.any() and truth.voxels.any() else math.nan)
            report.hausdorff[pid] = hd
            report.holdout_dice[pid] = metrics.dice(c)
            rows.append([pid, metrics.accuracy(c), metrics.dice(c), hd])
            log.info("predicted %s in %.1fs: dice %.4f hausdorff %.3f", pid,
                     time.perf_counter() - t1, metrics.dice(c), hd)
        write_csv(out / "holdout.csv", HOLDOUT_HEADER, rows)
        report.total_seconds = time.perf_counter() - t_start
        log.info("case %s finished: %d epochs, train %.1fs, total %.1fs", cfg.case, len(records),
                 train_seconds, report.total_seconds)
        return report
    finally:
        liverseg_logger.removeHandler(handler)
        liverseg_logger.setLevel(prev_level)
        handler.close()


def run_all(configs: Sequence[ExperimentConfig]) -> tuple:
    """Run every case; a failing case is logged and skipped.

    Returns ``(reports, failures)`` and writes ``final.csv`` for the
    successful cases.
    """
    reports, failures = [], {}
    cache: dict = {}
    for cfg in configs:
        key = id(cfg.data)
        try:
            if key not in cache:
                cache[key] = load_patients(cfg)
            reports.append(run_experiment(cfg, cache[key]))
        except (TrainingError, FloatingPointError) as exc:
            log.error("case %s aborted: %s", cfg.case, exc)
            failures[cfg.case] = str(exc)
    if configs:
        write_final_csv(Path(configs[0].output_dir) / "final.csv", reports)
    return reports, failures


def write_final_csv(path, reports: Sequence[CaseReport]) -> None:
    write_csv(path, FINAL_HEADER, [r.final_row() for r in reports])


# --------------------------------------------------------------------------
# prediction


def predict_volume(checkpoint, volume: Volume, out_dir=None, threshold: Optional[float] = None,
                   name: Optional[str] = None, overlays: bool = True) -> Volume:
    """Segment ``volume`` slice by slice and restack a uint8 mask of the same dims.

    ``checkpoint`` is a path or a loaded :class:`Checkpoint`.  With
    ``out_dir`` the mask goes to ``predictions/<name>_pred.nii`` and the
    red overlays to ``overlays/<name>/slice_NNN.ppm``.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    meta = ckpt.meta
    steps = meta.get("preprocess", [])
    axis = meta.get("axis", "sagittal")
    thr = float(meta.get("threshold", 0.5) if threshold is None else threshold)
    stack = slice_volume(volume, axis)
    native = stack.slices.shape[1:]
    x = prepare_slices(volume, steps, axis)
    depth = ckpt.model.config.depth
    check_divisible(x.shape[1:], depth)
    if meta.get("norm"):
        x = apply_norm(x, NormStats(**meta["norm"]))
    pred = (predict_proba(ckpt.model, x)[:, 0] >= thr).astype(np.uint8)
    if pred.shape[1:] != native:
        pred = np.stack([resize_mask(p, native) for p in pred])
    stack.slices = pred
    mask = restack(stack, dtype=np.uint8, spacing=volume.spacing)
    name = name or case_id(Path(volume.source_id or "volume"))
    mask.source_id = f"{name}_pred"

    if out_dir is not None:
        out_dir = Path(out_dir)
        write_nifti(mask, out_dir / "predictions" / f"{name}_pred.nii")
        if overlays:
            gray = slice_volume(Volume(quantize_u8(volume.voxels)[0]), axis).slices.astype(np.uint8)
            for i, (g, m) in enumerate(zip(gray, pred)):
                write_overlay(g, m, out_dir / "overlays" / name / f"slice_{i:03d}.ppm")
    return mask


# --------------------------------------------------------------------------
# evaluation and comparison


def _iter_units(a, b, truth, unit: str, axis: str):
    a, b, truth = (metrics.as_binary(np.asarray(v) > 0) for v in (a, b, truth))
    if unit == "volume":
        yield a, b, truth
        return
    ax = {"sagittal": 0, "coronal": 1, "axial": 2}[axis]
    for i in range(a.shape[ax]):
        yield (np.take(a, i, axis=ax), np.take(b, i, axis=ax), np.take(truth, i, axis=ax))


def paired_hausdorff(predictions_a, predictions_b, ground_truths, unit: str = "slice",
                     axis: str = "sagittal", labels: Optional[Sequence[str]] = None) -> tuple:
    """Per-case Hausdorff distances of both models against the truth.

    With ``unit="slice"`` every slice along ``axis`` is a case; slices where
    the truth or either prediction is empty (distance undefined) are skipped.
    Returns ``(case labels, distances_a, distances_b, n_skipped)``.
    """
    if not (len(predictions_a) == len(predictions_b) == len(ground_truths)):
        raise ValueError(
            f"unpaired cases: {len(predictions_a)} / {len(predictions_b)} predictions for "
            f"{len(ground_truths)} ground truths")
    if unit not in ("slice", "volume"):
        raise ValueError(f"unit must be 'slice' or 'volume', got {unit!r}")
    labels = list(labels) if labels is not None else [f"case{i:03d}" for i in range(len(ground_truths))]
    names, da, db, skipped = [], [], [], 0
    for label, pa, pb, gt in zip(labels, predictions_a, predictions_b, ground_truths):
        if not (np.shape(pa) == np.shape(pb) == np.shape(gt)):
            raise ValueError(f"{label}: mask shapes differ {np.shape(pa)}, {np.shape(pb)}, {np.shape(gt)}")
        for j, (a, b, t) in enumerate(_iter_units(pa, pb, gt, unit, axis)):
            if not (a.any() and b.any() and t.any()):
                skipped += 1
                continue
            names.append(label if unit == "volume" else f"{label}:{j}")
            da.append(metrics.hausdorff(a, t))
            db.append(metrics.hausdorff(b, t))
    return names, da, db, skipped


def ttest_rows(res: TTestResult, label_a: str, label_b: str) -> list:
    decision = "reject H0" if res.reject else "fail to reject H0"
    return [
        ["Group", label_a, label_b],
        ["Mean", res.mean_a, res.mean_b],
        ["SD", res.sd_a, res.sd_b],
        ["SEM", res.sem_a, res.sem_b],
        ["N", res.n, res.n],
        ["mean_diff", res.mean_diff, ""],
        ["sd_diff", res.sd_diff, ""],
        ["t", res.t, ""],
        ["df", res.df, ""],
        ["p", res.p, ""],
        ["alpha", res.alpha, ""],
        ["mu0", res.mu0, ""],
        ["cohen_d", res.cohen_d, ""],
        ["tail", res.tail, ""],
        ["decision", decision, ""],
    ]


def read_ttest_csv(path) -> dict:
    """Parse ``ttest.csv`` back into ``{statistic: (group_a, group_b)}`` strings."""
    return {r["statistic"]: (r["group_a"], r["group_b"]) for r in read_csv(path)}


def compare_models(predictions_a, predictions_b, ground_truths, alpha: float = 0.05,
                   out_dir=None, labels=("model_a", "model_b"), unit: str = "slice",
                   axis: str = "sagittal", tail: str = "one_sided_less",
                   case_labels: Optional[Sequence[str]] = None) -> TTestResult:
    """Paired one-sided t-test on Hausdorff distances to the ground truth.

    H0: model B's distance is at least model A's; rejecting it says B lies
    closer to the truth.  Writes ``ttest.csv`` and ``hausdorff_pairs.csv``
    into ``out_dir`` when given.
    """
    names, da, db, skipped = paired_hausdorff(predictions_a, predictions_b, ground_truths,
                                              unit, axis, case_labels)
    if len(da) < 2:
        raise ValueError(f"need at least 2 comparable cases, got {len(da)} ({skipped} skipped as empty)")
    res = paired_t_test(PairedSamples(tuple(da), tuple(db)), alpha=alpha, tail=tail)
    log.info("compare %s vs %s: N=%d (skipped %d) t=%.6f p=%.4g", labels[0], labels[1],
             res.n, skipped, res.t, res.p)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(out_dir / "ttest.csv", TTEST_HEADER, ttest_rows(res, *labels))
        write_csv(out_dir / "hausdorff_pairs.csv", PAIRS_HEADER, list(zip(names, da, db)))
    return res


def evaluate_predictions(pred_dir, truth_dir, out_path=None) -> list:
    """Accuracy, Dice and Hausdorff of every ``<id>_pred`` against ``<id>_mask``."""
    preds = find_volumes(pred_dir, "_pred")
    truths = find_volumes(truth_dir, "_mask")
    common = sorted(set(preds) & set(truths))
    if not common:
        raise FileNotFoundError(f"no matching <id>_pred / <id>_mask pairs in {pred_dir} and {truth_dir}")
    rows = []
    for k in common:
        p = read_nifti(preds[k]).voxels > 0
        t = read_nifti(truths[k]).voxels > 0
        c = metrics.confusion(p, t)
        hd = metrics.hausdorff(p, t) if p.any() and t.any() else math.nan
        rows.append([k, metrics.accuracy(c), metrics.dice(c), hd])
    if out_path is not None:
        write_csv(out_path, EVALUATE_HEADER, rows)
    return rows


def rebuild_final(run_dir) -> list:
    """Recreate ``final.csv`` from the per-case ``curves.csv`` files."""
    run_dir = Path(run_dir)
    rows = []
    for curves in sorted(run_dir.glob("*/curves.csv")):
        recs = read_csv(curves)
        if not recs:
            continue
        last = recs[-1]
        rows.append([curves.parent.name, float(last["train_acc"]), float(last["val_acc"]),
                     float(last["train_dice"]), float(last["val_dice"])])
    if not rows:
        raise FileNotFoundError(f"no <case>/curves.csv under {run_dir}")
    write_csv(run_dir / "final.csv", FINAL_HEADER, rows)
    return rows
