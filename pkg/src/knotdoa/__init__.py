"""Sparse direction-of-arrival detection from the knots of lasso paths.

The package builds uniform-linear-array models, computes lasso and
group-lasso homotopy paths, turns knot values into test statistics with
closed-form null distributions, and decides the number of sources.
"""

__version__ = "0.1.0"

from .detector import DetectionResult, detect, score  # noqa: E402
from .group_lasso_path import group_knots  # noqa: E402
from .lasso_path import general_knots, orthogonal_knots  # noqa: E402
from .signal_model import ArrayConfig, Scenario, build_array_model, synthesize  # noqa: E402
from .stat_tests import TestKind  # noqa: E402
from .thresholds import build_table, threshold_for  # noqa: E402

__all__ = [
    "ArrayConfig",
    "DetectionResult",
    "Scenario",
    "TestKind",
    "__version__",
    "build_array_model",
    "build_table",
    "detect",
    "general_knots",
    "group_knots",
    "orthogonal_knots",
    "score",
    "synthesize",
    "threshold_for",
]
