"""Experiment harness: configs, runner, checkpoints, CLI."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, ModelConfig, read_ini, write_ini
from .experiment import (
    CorpusData,
    ExperimentReport,
    cross_validate,
    evaluate,
    export_feature_cache,
    load_corpus,
    run_experiment,
)

__all__ = [
    "CorpusData",
    "ExperimentConfig",
    "ExperimentReport",
    "ModelConfig",
    "cross_validate",
    "evaluate",
    "export_feature_cache",
    "load_checkpoint",
    "load_corpus",
    "read_ini",
    "run_experiment",
    "save_checkpoint",
    "write_ini",
]
