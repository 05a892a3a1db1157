"""
Exception hierarchy shared by the library and the CLI.

Each exception carries the process exit code the CLI reports for it.
"""
from typing import Optional


class SegmentationError(Exception):
    """Root of every error raised on purpose by this package."""
    exit_code = 1


class UsageError(SegmentationError, ValueError):
    """Bad arguments or violated preconditions."""
    exit_code = 2


class ConfigError(UsageError):
    """Run configuration failed validation."""

    def __init__(self, message: str, errors: Optional[list] = None):
        super().__init__(message)
        self.errors = errors or []


class BoundsError(UsageError, IndexError):
    """A coordinate or origin lies outside its grid."""


class DataError(SegmentationError):
    """I/O or data content problem."""
    exit_code = 3


class FormatError(DataError):
    """Binary container with a bad magic, dtype code or version."""


class TruncationError(FormatError):
    """Payload length does not match the declared header."""


class ContentError(DataError):
    """Values outside the allowed domain, e.g. a label code not in {0,1,2}."""


class DegenerateDataError(DataError):
    """Data that cannot be normalized, e.g. zero variance."""


class DivergenceError(SegmentationError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""
    exit_code = 4

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
