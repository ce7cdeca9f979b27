"""Command-line entry point: ``liverseg <subcommand> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("liverseg.cli")


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load(args):
    from liverseg.runner.config import load_config

    return load_config(args.config, seed_override=args.seed, out_override=args.out)


def cmd_phantom_gen(args) -> int:
    from liverseg.phantom import PhantomConfig, write_phantoms

    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        raw = raw.get("data", {}).get("phantom", raw if "dims" in raw or "count" in raw else {})
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.count is not None:
        raw["count"] = args.count
    cfg = PhantomConfig(**raw)
    out = Path(args.out or "phantoms")
    paths = write_phantoms(cfg, out)
    (out / "phantom_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(paths)} phantom pairs to {out}")
    return 0


def cmd_preprocess(args) -> int:
    from liverseg.runner.experiment import load_patients, prepare_masks, prepare_slices
    from liverseg.volume_io import SliceStack, restack, write_nifti

    cfg = _load(args)[0]
    out = Path(args.out or Path(cfg.output_dir) / "preprocessed")
    for ct, mask in load_patients(cfg):
        name = ct.source_id[:-3] if ct.source_id.endswith("_ct") else ct.source_id
        x = prepare_slices(ct, cfg.preprocess, cfg.axis).astype(np.float32)
        m = prepare_masks(mask, cfg.preprocess, cfg.axis).astype(np.uint8)
        write_nifti(restack(SliceStack(x, cfg.axis)), out / f"{name}_ct.nii")
        write_nifti(restack(SliceStack(m, cfg.axis)), out / f"{name}_mask.nii")
    print(f"preprocessed volumes written to {out} (normalization is applied at training time)")
    return 0


def cmd_train(args) -> int:
    from liverseg.runner.experiment import run_all

    configs = _load(args)
    reports, failures = run_all(configs)
    for r in reports:
        print(f"{r.case}: epochs {len(r.epochs)}  train acc {r.final_train_accuracy:.4f}  "
              f"val acc {r.final_validation_accuracy:.4f}  train dice {r.final_train_dice:.4f}  "
              f"val dice {r.final_validation_dice:.4f}")
    for case, msg in failures.items():
        print(f"error: case {case} aborted: {msg}", file=sys.stderr)
    print(f"results in {configs[0].output_dir}")
    return 1 if failures else 0


def cmd_predict(args) -> int:
    from liverseg.runner.checkpoint import load_checkpoint
    from liverseg.runner.experiment import case_id, find_volumes, predict_volume
    from liverseg.volume_io import read_nifti

    ckpt = load_checkpoint(args.checkpoint)
    src = Path(args.input)
    inputs = list(find_volumes(src, "_ct").values()) if src.is_dir() else [src]
    if not inputs:
        raise FileNotFoundError(f"no *_ct.nii[.gz] volumes in {src}")
    out = Path(args.out or "predictions")
    for path in inputs:
        vol = read_nifti(path)
        mask = predict_volume(ckpt, vol, out, threshold=args.threshold, name=case_id(path),
                              overlays=not args.no_overlays)
        print(f"{path.name}: {int(mask.voxels.sum())} liver voxels -> {out / 'predictions'}")
    return 0


def cmd_evaluate(args) -> int:
    from liverseg.runner.experiment import evaluate_predictions

    out = Path(args.out or ".") / "evaluate.csv"
    rows = evaluate_predictions(args.pred, args.truth, out)
    for case, acc, dsc, hd in rows:
        print(f"{case}: accuracy {acc:.4f}  dice {dsc:.4f}  hausdorff {hd:.3f}")
    print(f"wrote {out}")
    return 0


def cmd_compare(args) -> int:
    from liverseg.runner.experiment import compare_models, find_volumes
    from liverseg.volume_io import read_nifti

    pa, pb = find_volumes(args.a, "_pred"), find_volumes(args.b, "_pred")
    truth = find_volumes(args.truth, "_mask")
    keys = sorted(truth)
    missing = [k for k in keys if k not in pa or k not in pb]
    if missing or not keys:
        raise FileNotFoundError(f"unpaired cases: predictions missing for {missing or 'all'}")
    load = lambda d: [read_nifti(d[k]).voxels for k in keys]  # noqa: E731
    res = compare_models(load(pa), load(pb), load(truth), alpha=args.alpha,
                         out_dir=args.out or ".", labels=(args.label_a, args.label_b),
                         unit=args.unit, axis=args.axis, case_labels=keys)
    print(f"{args.label_a}: M={res.mean_a:.6f} SD={res.sd_a:.6f} SEM={res.sem_a:.6f} N={res.n}")
    print(f"{args.label_b}: M={res.mean_b:.6f} SD={res.sd_b:.6f} SEM={res.sem_b:.6f} N={res.n}")
    print(f"t={res.t:.6f} df={res.df} p={res.p:.4g} d={res.cohen_d:.3f} alpha={res.alpha} "
          f"-> {'reject' if res.reject else 'fail to reject'} H0")
    return 0


def cmd_report(args) -> int:
    from liverseg.runner.experiment import rebuild_final

    run_dir = Path(args.out) if args.out else Path(_load(args)[0].output_dir)
    rows = rebuild_final(run_dir)
    print(f"{'case':<16}" + "".join(f"{h:>12}" for h in ("train acc", "val acc", "train dice", "val dice")))
    for case, *vals in rows:
        print(f"{case:<16}" + "".join(f"{v:>12.4f}" for v in vals))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liverseg", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", parents=[common], help="write synthetic NIfTI pairs")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("preprocess", parents=[common], help="write preprocessed volumes")
    p.set_defaults(func=cmd_preprocess, needs_config=True)

    p = sub.add_parser("train", parents=[common], help="run every case of a config")
    p.set_defaults(func=cmd_train, needs_config=True)

    p = sub.add_parser("predict", parents=[common], help="segment volumes with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="a *_ct.nii file or a directory of them")
    p.add_argument("--threshold", type=float)
    p.add_argument("--no-overlays", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="paired t-test on Hausdorff distances")
    p.add_argument("--a", required=True, help="prediction directory of model A")
    p.add_argument("--b", required=True, help="prediction directory of model B")
    p.add_argument("--truth", required=True)
    p.add_argument("--label-a", default="model_a")
    p.add_argument("--label-b", default="model_b")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--unit", choices=("slice", "volume"), default="slice")
    p.add_argument("--axis", choices=("sagittal", "coronal", "axial"), default="sagittal")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", parents=[common], help="rebuild final.csv from case curves")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    # case logs raise the package logger to INFO for log.txt; keep the console quiet
    for h in logging.getLogger().handlers:
        h.setLevel(level)
    if getattr(args, "needs_config", False) and not args.config:
        print(f"error: {args.command} needs --config", file=sys.stderr)
        return 2
    if args.command == "report" and not (args.config or args.out):
        print("error: report needs --out RUN_DIR or --config", file=sys.stderr)
        return 2
    try:
        with _threads(args.threads):
            return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
