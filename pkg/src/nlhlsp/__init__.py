"""Nonlinear hierarchical least-squares programming solver.

A stack of prioritized least-squares objectives is solved by an outer
trust-region loop with a per-level step filter; each linearized sub-problem
is handled by a reduced-Hessian interior-point method whose nullspace bases
come from a recycling turnback algorithm tailored to banded matrices.
"""
from .matrix_kernels import (
    SparseMatrix,
    UpdatableLU,
    cholesky_solve,
    load_matrix_market,
    lu_add_column,
    lu_add_column_nonpermuting,
    lu_factorize,
    lu_remove_column,
    save_matrix_market,
    solve_u1,
)
from .turnback import (
    NullspaceBasis,
    TurnbackError,
    TurnbackPlan,
    find_index_vectors,
    get_max_rank,
    lu_nullspace,
    turnback_nullspace,
)
from .hlsp_ipm import (
    BarrierDomainError,
    HlspLevel,
    HlspSolution,
    IpmError,
    IpmSettings,
    solve_hlsp,
)
from .step_filter import (
    Filter,
    filter_acceptable,
    filter_add,
    nstra_update,
    reductions,
    step_filter_iterate,
)
from .shlsp import (
    NlHierarchy,
    NlSolveResult,
    NlTask,
    RunRecord,
    SolverSettings,
    build_linearization,
    compute_h,
    solve_nl_hlsp,
)

__all__ = [
    "SparseMatrix",
    "UpdatableLU",
    "cholesky_solve",
    "load_matrix_market",
    "lu_add_column",
    "lu_add_column_nonpermuting",
    "lu_factorize",
    "lu_remove_column",
    "save_matrix_market",
    "solve_u1",
    "NullspaceBasis",
    "TurnbackError",
    "TurnbackPlan",
    "find_index_vectors",
    "get_max_rank",
    "lu_nullspace",
    "turnback_nullspace",
    "BarrierDomainError",
    "HlspLevel",
    "HlspSolution",
    "IpmError",
    "IpmSettings",
    "solve_hlsp",
    "Filter",
    "filter_acceptable",
    "filter_add",
    "nstra_update",
    "reductions",
    "step_filter_iterate",
    "NlHierarchy",
    "NlSolveResult",
    "NlTask",
    "RunRecord",
    "SolverSettings",
    "build_linearization",
    "compute_h",
    "solve_nl_hlsp",
]

__version__ = "0.1.0"
