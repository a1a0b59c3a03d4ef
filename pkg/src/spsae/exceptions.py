"""Exception hierarchy shared across the package."""


class SpsaeError(Exception):
    """Base class for all package errors."""


class DataError(SpsaeError):
    """Invalid input data or file format (validation failure)."""


class EstimationError(SpsaeError):
    """Numerical failure during estimation or inference."""


class SingularMatrixError(EstimationError):
    """An information matrix is singular or too ill-conditioned to invert."""

    def __init__(self, message, condition_number=None):
        if condition_number is not None:
            message = f"{message} (condition number {condition_number:.3e})"
        super().__init__(message)
        self.condition_number = condition_number
