"""Exception types raised by the GP core, the trainer and the data layer."""

from typing import Any, Optional


class SolveGpError(Exception):
    """Base class for every error raised by this package"""


class ArgumentError(SolveGpError, ValueError):
    """Invalid argument: dimension mismatch, wrong mode, bad split fractions"""


class NumericalError(SolveGpError, ArithmeticError):
    """A factorization failed after jitter escalation, or a value went non-finite"""

    def __init__(self, message: str, jitter: Optional[float] = None, block: Optional[str] = None):
        super().__init__(message)
        self.jitter = jitter
        self.block = block


class DataFormatError(SolveGpError, ValueError):
    """A CSV cell could not be parsed as a decimal real"""

    def __init__(self, message: str, row: int, column: str):
        super().__init__(message)
        self.row = row
        self.column = column


class TrainingAborted(SolveGpError):
    """Training stopped on a numerical error; carries the last good model"""

    def __init__(self, message: str, iteration: int, last_good_model: Any, cause: Exception):
        super().__init__(message)
        self.iteration = iteration
        self.last_good_model = last_good_model
        self.cause = cause


class ConfigError(ArgumentError):
    """A run configuration failed validation; `errors` lists every violation"""

    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)
