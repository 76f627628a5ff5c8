"""Uncertainty-aware Mobile-Former classifier for event-camera streams, in numpy."""

from .errors import (CheckpointError, ConfigError, DataError, DimensionError, EmptyInputError,
                     NumericError, UAMFError, UsageError)
from .model import ModelConfig, UAMobileFormer, cross_entropy
from .training import TrainConfig, evaluate_top1, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "DimensionError", "EmptyInputError",
    "NumericError", "UAMFError", "UsageError", "ModelConfig", "UAMobileFormer", "cross_entropy",
    "TrainConfig", "evaluate_top1", "train",
]
