"""Exception types shared across the package."""


class GpMpcError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GpMpcError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(GpMpcError, ArithmeticError):
    """A factorization or integration produced unusable numbers."""


class TrainingError(GpMpcError):
    """Hyperparameter optimisation failed on every restart."""


class DataError(GpMpcError):
    """A log or dataset is missing required content."""
