"""Experiment orchestration: configs, checkpoints, the pipeline and the CLI."""

from liverseg.runner.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from liverseg.runner.config import ConfigError, ExperimentConfig, load_config, parse_config
from liverseg.runner.experiment import (
    CaseReport,
    compare_models,
    evaluate_predictions,
    predict_volume,
    run_all,
    run_experiment,
)

__all__ = [
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "ConfigError", "ExperimentConfig", "load_config", "parse_config",
    "CaseReport", "run_experiment", "run_all", "predict_volume",
    "compare_models", "evaluate_predictions",
]
