"""Raw HDR reconstruction from exposure-bracketed stacks with a recurrent network."""

from . import autodiff, evalkit, rawimg, simpipe, tmrnet, train
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    NumericalError,
    ParameterError,
    ShapeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "evalkit",
    "rawimg",
    "simpipe",
    "tmrnet",
    "train",
    "ConfigurationError",
    "DimensionError",
    "FormatError",
    "NumericalError",
    "ParameterError",
    "ShapeError",
    "UsageError",
]
