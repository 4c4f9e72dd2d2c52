"""Pairwise cross-smoothing (PCS) of categorical group means.

Shrinks every group mean toward the first-stage means of all other groups
with pair-specific, MSE-optimal weights; includes ridge, generalized ridge,
kernel and Mallows C_p comparison estimators, asymptotic risk evaluation
and a Monte Carlo harness.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .core import (PcsEstimate, PenaltyMatrix, WeightMatrix, oracle_weights,  # noqa: E402
                   pcs_estimate, pcs_from_penalties, pcs_plugin, penalties_from_weights,
                   plugin_weights)
from .exceptions import (DegenerateVarianceError, ExistenceError, InputError,  # noqa: E402
                         InsufficientDataError, OptimizationError, PCSError,
                         SimulationAborted)
from .groups import (DeltaOperator, GroupedSample, GroupSummary, delta_operator,  # noqa: E402
                     read_grouped_csv, summarize)

__all__ = [
    "__version__", "GroupedSample", "GroupSummary", "DeltaOperator", "delta_operator",
    "summarize", "read_grouped_csv", "WeightMatrix", "PenaltyMatrix", "PcsEstimate",
    "oracle_weights", "plugin_weights", "pcs_estimate", "pcs_plugin", "pcs_from_penalties",
    "penalties_from_weights", "PCSError", "InputError", "InsufficientDataError",
    "DegenerateVarianceError", "ExistenceError", "OptimizationError", "SimulationAborted",
]
