"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array dimensions are incompatible with the requested operation."""


class ShapeError(ValueError):
    """Tensor shapes do not match an operator's contract."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid range."""


class ConfigurationError(ValueError):
    """A configuration is inconsistent or cannot be satisfied."""


class UsageError(RuntimeError):
    """An API was called in an invalid order or state."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(IOError):
    """A file on disk does not follow the expected binary layout."""
