"""Two-stream RGB-D fusion: attention mixing, channel gating, a small set-prediction model and its tooling."""

from .errors import (ConfigurationError, ContractError, DimensionError, FormatError, GenerationError, NumericError,
                     RgbdFuseError, TrainingError, ValidationError)
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "GenerationError",
    "NumericError",
    "RgbdFuseError",
    "Tape",
    "Tensor",
    "TrainingError",
    "ValidationError",
    "__version__",
]
