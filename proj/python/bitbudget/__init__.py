"""Mixed-precision bit allocation: quantizer backend, differentiable stage-1
mask learning, and exact stage-2 discrete projection."""

from bitbudget._core import (
    InfeasibleBudgetError,
    IntegrityError,
    ResourceLimitError,
    allocation_similarity,
    learn_scores,
    mckp_solve,
    quantize_rtn,
    solve_allocation,
    version,
    worker_count,
)

__all__ = [
    "InfeasibleBudgetError",
    "IntegrityError",
    "ResourceLimitError",
    "allocation_similarity",
    "learn_scores",
    "mckp_solve",
    "quantize_rtn",
    "solve_allocation",
    "version",
    "worker_count",
]
