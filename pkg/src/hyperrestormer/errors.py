"""Exception types shared across the package."""


class HyperRestormerError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HyperRestormerError, ValueError):
    """Raised when shapes, hyperparameters or flags are inconsistent."""


class NumericError(HyperRestormerError, ArithmeticError):
    """Raised when a computation produces non-finite values."""


class CubeFormatError(HyperRestormerError, IOError):
    """Raised when a cube file or checkpoint cannot be read."""
