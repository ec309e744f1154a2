"""Continuous Bayesian relaxation of sequencing problems.

Discrete "which target next" choices are replaced by Gaussian beliefs over
an expected target; a gradient-based optimizer then tunes the beliefs so
that the targets they select form a cheap tour.
"""

from .engine import (
    DesignLayout,
    DesignVector,
    EvaluationError,
    NodeDesign,
    ObjectiveSettings,
    SequenceEvaluation,
    SequenceObjective,
    SequenceProblem,
    evaluate_sequence,
)
from .gaussian import GaussianBelief, JointGaussian, SUTScaling, chi_square_quantile, condition, sut_propagate
from .optimizer import OptimizerConfig, SolveTrace, fd_gradient, minimize, multi_start

__version__ = "0.1.0"

__all__ = [
    "DesignLayout",
    "DesignVector",
    "EvaluationError",
    "GaussianBelief",
    "JointGaussian",
    "NodeDesign",
    "ObjectiveSettings",
    "OptimizerConfig",
    "SUTScaling",
    "SequenceEvaluation",
    "SequenceObjective",
    "SequenceProblem",
    "SolveTrace",
    "chi_square_quantile",
    "condition",
    "evaluate_sequence",
    "fd_gradient",
    "minimize",
    "multi_start",
    "sut_propagate",
]
