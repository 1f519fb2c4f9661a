"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code so scripted pipelines can
distinguish configuration mistakes from data problems and from numerical
failures.
"""

from __future__ import annotations

__all__ = [
    "CtmsmError",
    "ConfigError",
    "DataValidationError",
    "NumericalError",
    "NonIdentifiableError",
    "SeparationError",
    "PositivityError",
]


class CtmsmError(Exception):
    """Base class for all package errors."""


class ConfigError(CtmsmError):
    """Invalid configuration, hyperparameters out of range, bad paths."""

    exit_code = 2


class DataValidationError(CtmsmError):
    """Input panel violates the counting-process data contract."""

    exit_code = 3


class NumericalError(CtmsmError):
    """Numerical failure during estimation."""

    exit_code = 4


class NonIdentifiableError(NumericalError):
    """Singular information matrix: collinear covariates on event risk sets."""


class SeparationError(NumericalError):
    """Monotone partial likelihood: a coefficient diverges."""


class PositivityError(NumericalError):
    """A denominator survival/density is numerically zero for some subject."""
