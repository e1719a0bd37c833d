"""Calibration, margin moments and Gauss-Newton curvature for small numpy MLPs."""

from .errors import (BoundViolation, CalcurveError, ConfigError, DimensionError, FormatError, NumericalFailure,
                     SpecError, UndefinedCorrelation)

__version__ = "0.1.0"

__all__ = [
    "BoundViolation", "CalcurveError", "ConfigError", "DimensionError", "FormatError", "NumericalFailure",
    "SpecError", "UndefinedCorrelation", "__version__",
]
