"""Exception hierarchy shared across the package.

The CLI maps each class onto a fixed exit code, so raise the most specific
one that applies.
"""


class CapsError(Exception):
    """Base class for every error raised by capsfeat."""


class ConfigError(CapsError, ValueError):
    """Bad shapes, bad hyperparameters, or an inconsistent configuration."""


class UsageError(CapsError, ValueError):
    """An API was called in a way its contract forbids."""


class NumericError(CapsError, ArithmeticError):
    """A NaN or Inf showed up where a finite value is required."""


class IngestError(CapsError, IOError):
    """A dataset file could not be parsed."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch
