"""Lifelong generative modelling with a student-teacher VAE."""

from .errors import FormatError, NumericError, StateError, TrainingError
from .lifelong import METHODS, ExperimentResult, LifelongState, MetricsRecord, TrainConfig, run_sequence
from .networks import VAE, ArchSpec, init_model

__all__ = [
    "ArchSpec", "ExperimentResult", "FormatError", "LifelongState", "METHODS", "MetricsRecord",
    "NumericError", "StateError", "TrainConfig", "TrainingError", "VAE", "init_model", "run_sequence",
]
__version__ = "0.1.0"
