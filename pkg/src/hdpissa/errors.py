"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an operation receives malformed or out-of-range arguments."""


class ConvergenceError(ArithmeticError):
    """Raised when an iterative routine hits its iteration cap."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalError(ArithmeticError):
    """Raised when training produces a non-finite loss or gradient."""
