"""Exception types raised across the package."""

from __future__ import annotations


class PeriodicQCDError(ValueError):
    """Base class for all package errors."""


class InvalidObservationError(PeriodicQCDError):
    """An observation does not fit the support of a density family."""


class InvalidPairError(PeriodicQCDError):
    """Two densities cannot be compared (different support types)."""


class IncompatibleLawsError(PeriodicQCDError):
    """Periodic laws disagree on period or family."""


class InvalidConfigError(PeriodicQCDError):
    """A detector or run configuration is inconsistent."""


class InvalidCurveError(PeriodicQCDError):
    """A parameter curve maps to an invalid density parameter."""


class InvalidInputError(PeriodicQCDError):
    """Malformed input data (empty sequences, bad rows)."""
