"""Dense SQP solver for the transcribed control problems."""

from .qp import QPResult, solve_qp
from .sqp import (
    CONVERGED,
    INFEASIBLE,
    MAX_ITER,
    NUMERICAL_FAILURE,
    NlpProblem,
    SolveOptions,
    SolveResult,
    check_derivatives,
    kkt_residuals,
    solve,
)

__all__ = [
    "CONVERGED", "INFEASIBLE", "MAX_ITER", "NUMERICAL_FAILURE", "NlpProblem", "QPResult",
    "SolveOptions", "SolveResult", "check_derivatives", "kkt_residuals", "solve", "solve_qp",
]
