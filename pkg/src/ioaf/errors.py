"""Exception hierarchy for the toolkit.

Split by how the CLI reports them: validation problems in external input
exit with status 2, numerical problems discovered mid-computation exit
with status 3.
"""

from __future__ import annotations


class IoafError(Exception):
    """Base class for all toolkit errors."""


class DataValidationError(IoafError):
    """External input (CSV, JSON, config values) failed validation."""


class TraceFormatError(DataValidationError):
    """A trace document could not be parsed or failed field validation."""


class TraceStateError(IoafError):
    """A trace recorder was used after finalization."""


class NumericalError(IoafError):
    """A computation produced or met values it cannot work with."""


class DegenerateInputError(NumericalError):
    """Statistical input with no variance or too few points."""


class NonFiniteEvaluationError(NumericalError):
    """A function evaluation returned NaN or infinity."""


class TrainingDivergenceError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class ScenarioBuildError(NumericalError):
    """A built-in scenario could not reach its designed evaluation slice."""
