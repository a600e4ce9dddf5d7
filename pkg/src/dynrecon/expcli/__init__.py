"""Declarative experiment runner: config parsing, pipelines, reports and the CLI."""
from .config import ConfigError, ExperimentConfig, parse_config, parse_config_text, stage_seed
from .runner import RunReport, StageError, compare_runs, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "parse_config_text", "stage_seed",
           "RunReport", "StageError", "compare_runs", "run_experiment"]
