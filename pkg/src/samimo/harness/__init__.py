"""Experiment orchestration: configs, datasets, runs, results and figures."""

from samimo.harness.config import ConfigError, load_config, save_config, validate_config
from samimo.harness.runner import ResultsRecord, evaluate, gen_dataset, run, train

__all__ = [
    "ConfigError",
    "ResultsRecord",
    "evaluate",
    "gen_dataset",
    "load_config",
    "run",
    "save_config",
    "train",
    "validate_config",
]
