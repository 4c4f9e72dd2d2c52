"""Exception hierarchy shared by all estimators."""

from __future__ import annotations


class PCSError(Exception):
    """Base class for every error raised by :mod:`pcshrink`."""


class InputError(PCSError, ValueError):
    """Malformed or inconsistent input data."""


class InsufficientDataError(PCSError, ValueError):
    """A group has too few observations for the requested statistic."""

    def __init__(self, message: str, group: int | None = None):
        super().__init__(message)
        self.group = group


class DegenerateVarianceError(PCSError, ValueError):
    """A group variance is zero where a positive variance is required."""

    def __init__(self, message: str, group: int | None = None):
        super().__init__(message)
        self.group = group


class ExistenceError(PCSError, ValueError):
    """Penalties violate the existence condition of the penalized problem."""

    def __init__(self, message: str, row: int | None = None, total: float | None = None):
        super().__init__(message)
        self.row = row
        self.total = total


class OptimizationError(PCSError, RuntimeError):
    """A smoothing-parameter search failed to produce a finite minimum."""


class SimulationAborted(PCSError, RuntimeError):
    """Too many replications failed in a Monte Carlo run."""
