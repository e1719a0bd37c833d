"""Exception types shared across the package."""

from __future__ import annotations


class CalcurveError(Exception):
    """Base class for all errors raised by calcurve."""


class SpecError(CalcurveError, ValueError):
    """Invalid network, loss, optimizer or probe settings."""


class DimensionError(CalcurveError, ValueError):
    """Array shapes do not match what the network or operator expects."""


class NumericalFailure(CalcurveError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(CalcurveError, ValueError):
    """A file on disk does not follow the expected binary or CSV layout."""


class ConfigError(CalcurveError, ValueError):
    """Experiment configuration failed validation.

    ``pointer`` is a JSON pointer to the offending key ("" for the root).
    """

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(message)
        self.pointer = pointer


class UndefinedCorrelation(CalcurveError, ValueError):
    """Pearson correlation requested for a series with zero variance."""


class BoundViolation(CalcurveError):
    """A bound that must hold for the computed quantities failed during a run."""
