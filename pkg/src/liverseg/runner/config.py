"""JSON experiment configuration.

A run file holds shared settings plus a ``cases`` list; each case names a
model and training setup::

    {
      "name": "desk",
      "seed": 0,
      "data": {"phantom": {"dims": [64, 64, 32], "count": 6}},
      "holdout": 2,
      "axis": "sagittal",
      "threshold": 0.5,
      "preprocess": [{"op": "quantize"}, {"op": "gaussian", "sigma": 1.0},
                     {"op": "diffusion", "s": 15, "lambda": 0.25, "iterations": 10},
                     {"op": "normalize"}],
      "output_dir": "runs/desk",
      "cases": [
        {"case": "unet", "model": {"family": "unet", "depth": 2, "base_channels": 8},
         "train": {"epochs": 10, "batch_size": 8, "validation_split": 0.2}}
      ]
    }

``data`` is either ``{"phantom": {...PhantomConfig...}}`` or
``{"nifti_dir": PATH}`` holding ``<id>_ct.nii[.gz]`` / ``<id>_mask.nii[.gz]``
pairs.  A top-level ``case``/``model``/``train`` triple may replace
``cases``.  Seeds left out of ``model``, ``train`` and ``phantom`` inherit
the top-level ``seed``; a command-line ``--seed`` overrides all of them.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from liverseg.nn.models import ModelConfig
from liverseg.nn.train import TrainConfig
from liverseg.phantom import PhantomConfig
from liverseg.preprocess import validate_steps
from liverseg.volume_io import AXES

DEFAULT_PREPROCESS = [
    {"op": "quantize"},
    {"op": "gaussian", "sigma": 1.0},
    {"op": "diffusion", "s": 15.0, "lambda": 0.25, "iterations": 10},
    {"op": "normalize"},
]


class ConfigError(ValueError):
    pass


@dataclass
class DataSource:
    phantom: Optional[PhantomConfig] = None
    nifti_dir: Optional[Path] = None

    def describe(self) -> str:
        return f"phantom(seed={self.phantom.seed})" if self.phantom else str(self.nifti_dir)


@dataclass
class ExperimentConfig:
    case: str
    data: DataSource
    model: ModelConfig
    train: TrainConfig
    preprocess: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_PREPROCESS))
    axis: str = "sagittal"
    output_dir: Path = Path("runs")
    threshold: float = 0.5
    holdout: int = 2

    @property
    def case_dir(self) -> Path:
        return Path(self.output_dir) / self.case


_TOP_KEYS = {"name", "seed", "data", "holdout", "axis", "threshold", "preprocess",
             "output_dir", "cases", "case", "model", "train"}


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")


def _build(kind, d: dict, where: str):
    try:
        return kind(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_data(d: dict, seed: int, base: Path, seed_override: Optional[int] = None) -> DataSource:
    if not isinstance(d, dict) or len(d) != 1 or next(iter(d)) not in ("phantom", "nifti_dir"):
        raise ConfigError("data: expected exactly one of {'phantom': {...}} or {'nifti_dir': PATH}")
    if "phantom" in d:
        p = dict(d["phantom"] or {})
        p.setdefault("seed", seed)
        if seed_override is not None:
            p["seed"] = seed_override
        return DataSource(phantom=_build(PhantomConfig, p, "data.phantom"))
    path = Path(d["nifti_dir"])
    return DataSource(nifti_dir=path if path.is_absolute() else base / path)


def parse_config(raw: dict, base_dir=".", seed_override: Optional[int] = None,
                 out_override=None) -> list:
    """Expand a run dictionary into one :class:`ExperimentConfig` per case."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    base = Path(base_dir)
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    data = parse_data(raw.get("data", {"phantom": {}}), seed, base, seed_override)
    axis = raw.get("axis", "sagittal")
    if axis not in AXES:
        raise ConfigError(f"axis: {axis!r} is not one of {sorted(AXES)}")
    steps = raw.get("preprocess", DEFAULT_PREPROCESS)
    try:
        validate_steps(steps)
    except ValueError as exc:
        raise ConfigError(f"preprocess: {exc}") from None
    threshold = float(raw.get("threshold", 0.5))
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    holdout = int(raw.get("holdout", 2))
    if holdout < 0:
        raise ConfigError(f"holdout must be >= 0, got {holdout}")
    out = Path(out_override) if out_override is not None else Path(raw.get("output_dir", "runs"))
    if not out.is_absolute() and out_override is None:
        out = base / out

    if "cases" in raw:
        cases = raw["cases"]
    elif "model" in raw or "train" in raw:
        cases = [{"case": raw.get("case", raw.get("name", "case1")),
                  "model": raw.get("model", {}), "train": raw.get("train", {})}]
    else:
        raise ConfigError("config needs a 'cases' list or a top-level 'model'/'train' pair")
    if not cases:
        raise ConfigError("'cases' is empty")

    result, seen = [], set()
    for i, c in enumerate(cases):
        where = f"cases[{i}]"
        _check_keys(c, {"case", "model", "train"}, where)
        name = str(c.get("case", f"case{i + 1}"))
        if name in seen:
            raise ConfigError(f"{where}: duplicate case name {name!r}")
        seen.add(name)
        m = dict(c.get("model", {}))
        t = dict(c.get("train", {}))
        for d in (m, t):
            d.setdefault("seed", seed)
            if seed_override is not None:
                d["seed"] = seed
        result.append(ExperimentConfig(
            case=name, data=data,
            model=_build(ModelConfig, m, f"{where}.model"),
            train=_build(TrainConfig, t, f"{where}.train"),
            preprocess=copy.deepcopy(steps), axis=axis, output_dir=out,
            threshold=threshold, holdout=holdout,
        ))
    return result


def load_config(path, seed_override: Optional[int] = None, out_override=None) -> list:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, path.parent, seed_override, out_override)
