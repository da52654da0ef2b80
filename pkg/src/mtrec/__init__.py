"""Multi-task recommender engine with shared and task-specific embedding
tables, stop-gradient expert routing, baseline gating regimes, and a
negative-transfer evaluation protocol."""

from . import analysis, data, evaluation, model, ndcore, train
from .errors import ConfigError, DataError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "data",
    "evaluation",
    "model",
    "ndcore",
    "train",
    "ConfigError",
    "DataError",
    "NumericError",
    "ShapeError",
]
