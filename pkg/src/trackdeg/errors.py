"""Exception hierarchy for trackdeg.

The CLI maps these onto exit codes:
- ConfigError -> 1
- DataError (and subclasses) -> 2
- ConvergenceError -> 3
"""

from __future__ import annotations


class TrackDegError(Exception):
    """Base class for all trackdeg errors."""


class ConfigError(TrackDegError, ValueError):
    """Invalid or unreadable configuration."""


class DataError(TrackDegError, ValueError):
    """Input data violates a structural requirement."""


class EmptySeriesError(DataError):
    """A series has fewer observations than the operation needs."""


class IngestError(DataError):
    """A raw or segment-series file could not be read."""


class ModelSpecificationError(DataError):
    """Inputs are inconsistent with the model (e.g. missing post-maintenance state)."""


class DecompositionError(TrackDegError, ValueError):
    """A matrix expected to be positive definite is not."""


class NumericError(TrackDegError, ArithmeticError):
    """A density evaluated to a non-finite value."""


class InitializationError(TrackDegError, RuntimeError):
    """The sampler could not find a finite starting point."""

    def __init__(self, message: str, segment_id: int | None = None) -> None:
        super().__init__(message)
        self.segment_id = segment_id


class ConvergenceError(TrackDegError, RuntimeError):
    """Chains failed the R-hat gate."""

    def __init__(self, message: str, worst_rhat: float) -> None:
        super().__init__(message)
        self.worst_rhat = worst_rhat
