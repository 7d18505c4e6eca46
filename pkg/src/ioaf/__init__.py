"""Debugging toolkit for gradient-based adversarial robustness evaluations.

Runs bounded gradient attacks against small differentiable classifiers,
records per-iteration traces, computes failure indicators (i1..i5) from the
traces, and drives a staged mitigation protocol (M1..M5) that re-evaluates
robust accuracy after each fix.
"""

from .errors import (
    DataValidationError,
    DegenerateInputError,
    IoafError,
    NonFiniteEvaluationError,
    NumericalError,
    TraceFormatError,
    TraceStateError,
    TrainingDivergenceError,
)
from .numerics import SeededRng, finite_diff_gradient, pearson_correlation, sample_gaussian

__all__ = [
    "DataValidationError",
    "DegenerateInputError",
    "IoafError",
    "NonFiniteEvaluationError",
    "NumericalError",
    "TraceFormatError",
    "TraceStateError",
    "TrainingDivergenceError",
    "SeededRng",
    "finite_diff_gradient",
    "pearson_correlation",
    "sample_gaussian",
]
