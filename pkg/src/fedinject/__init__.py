"""Federated multi-modal multi-task training with knowledge injection into a frozen stub."""

__version__ = "0.1.0"

from .config import ExperimentConfig, parse_config
from .datagen import build_dataset
from .evaluation import run_benchmark_matrix, run_zero_shot
from .federation import aggregate, run_experiment, run_round
from .metrics import MetricsRow, classification_metrics

__all__ = ["ExperimentConfig", "parse_config", "build_dataset", "run_benchmark_matrix",
           "run_zero_shot", "aggregate", "run_experiment", "run_round", "MetricsRow",
           "classification_metrics"]
