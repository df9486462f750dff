"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations


class ConformalOODError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ConformalOODError, ValueError):
    """Invalid parameters, mismatched lengths, or unsupported options."""


class DomainError(ConformalOODError, ValueError):
    """Argument outside the mathematical domain of a function."""


class CalibrationError(ConformalOODError):
    """A requested calibration target cannot be reached with the given data."""


class CapacityError(ConformalOODError):
    """A search exhausted its limit without finding a feasible value.

    Attributes:
        best_margin: the largest (closest to feasible) margin seen during the search.
        best_n: the argument at which ``best_margin`` was observed.
    """

    def __init__(self, message: str, best_margin: float, best_n: int | None = None) -> None:
        super().__init__(message)
        self.best_margin = best_margin
        self.best_n = best_n


class FittingError(ConformalOODError):
    """Score statistics could not be fitted (missing classes, singular covariance)."""


class ValidationError(ConformalOODError, ValueError):
    """Input data violates a documented invariant (e.g. negative Gram features)."""


class ParseError(ConformalOODError, ValueError):
    """A file could not be parsed; the message carries the location."""


class SchemaVersionError(ConformalOODError):
    """A file was written with an unsupported schema version."""


class ChecksumError(ConformalOODError):
    """Stored checksum does not match the file payload."""
