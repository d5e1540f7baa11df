"""Outer loop: sequential linearization with a hierarchical step filter.

Each priority level of the nonlinear hierarchy is driven to a KKT point by a
trust-region step filter; every outer iteration linearizes all levels,
solves the full linearized hierarchy, and tests the candidate step against
the current level's filter.  Shadow filters on the lower levels adapt their
own trust-region radii inside the sub-problem (nullspace trust-region
adaptation), which lets those levels converge early without disturbing the
levels already frozen.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.csgraph import connected_components

from .hlsp_ipm import HlspLevel, HlspSolution, IpmSettings, solve_hlsp
from .step_filter import (
    Filter,
    TrustRegionStall,
    filter_acceptable,
    filter_add,
    nstra_update,
    reductions,
    step_filter_iterate,
)


class EvaluatorError(RuntimeError):
    """A residual or Jacobian evaluator returned non-finite values."""


@dataclass
class NlTask:
    """One task: a residual with its Jacobian and optional curvature.

    ``weighted_hessian(x, w)`` must return ``sum_i w_i * hess(f_i)(x)``;
    tasks without it contribute no second-order rows (Gauss-Newton).
    """

    f: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    kind: str  # 'eq' | 'ineq'
    weighted_hessian: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("eq", "ineq"):
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class NlHierarchy:
    """Prioritized task levels sharing one variable vector."""

    levels: list[list[NlTask]]
    n: int
    name: str = ""

    @property
    def p(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class SolverSettings:
    """Outer-loop settings; keys mirror the text-config schema."""

    rho0: float = 10.0
    chi: float = 1e-5
    epsilon: float = 1e-6
    beta: float = 0.99
    gamma: float = 1e-4
    sigma: float = 0.1
    kappa: float = 100.0
    inertia: int = 2
    hessian_mode: str = "newton"  # 'newton' | 'bfgs' | 'gauss_newton_auto'
    max_outer: int = 500
    max_inner: int = 200
    nstra: bool = True
    xi: float = 1e-8
    ipm_tol: float = 1e-10
    rho_min: float = 1e-14
    #: the filter cap u is this multiple of chi (plus the entry infeasibility):
    #: it bounds how far any accepted iterate may degrade converged levels
    filter_cap_factor: float = 10.0
    hessian_floor: float = 1e-9

    def ipm(self) -> IpmSettings:
        return IpmSettings(ipm_tol=self.ipm_tol, xi=self.xi, max_inner=self.max_inner)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverSettings":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        mode = known.get("hessian_mode")
        if mode is not None:
            known["hessian_mode"] = _canonical_mode(mode)
        return cls(**known)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _canonical_mode(mode: str) -> str:
    aliases = {"gn": "gauss_newton_auto", "gauss_newton": "gauss_newton_auto"}
    mode = aliases.get(mode, mode)
    if mode not in ("newton", "bfgs", "gauss_newton_auto"):
        raise ValueError(f"unknown hessian mode {mode!r}")
    return mode


@dataclass
class FrozenLevel:
    """Optimal slacks of a converged level, in task space."""

    v_eq: np.ndarray
    v_ineq: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.v_eq**2) + np.sum(self.v_ineq**2)))


@dataclass
class RunRecord:
    """One outer iteration's metrics."""

    k: int
    hsf_level: int
    accepted: bool
    converged_level: bool
    h: float
    f_plus: np.ndarray
    rho: np.ndarray
    inner_iterations: int
    solve_time: float
    nnz: np.ndarray
    kkt_residual: float
    step_norm: float


@dataclass
class NlSolveResult:
    x: np.ndarray
    v_star: list[FrozenLevel]
    multipliers: list
    trace: list[RunRecord]
    converged: bool
    status: str
    outer_iterations: int
    inner_iterations: int
    solve_time: float

    def v_star_norm(self, l: int) -> float:
        return self.v_star[l - 1].norm()


# -- evaluation helpers ------------------------------------------------

@dataclass
class _LevelEval:
    f_eq: np.ndarray
    f_ineq: np.ndarray

    def f_plus_norm(self) -> float:
        viol = np.maximum(0.0, self.f_ineq)
        return float(np.sqrt(np.sum(self.f_eq**2) + np.sum(viol**2)))


def _eval_residuals(problem: NlHierarchy, x: np.ndarray) -> list[_LevelEval]:
    out = []
    for tasks in problem.levels:
        eqs, ineqs = [], []
        for t in tasks:
            val = np.atleast_1d(np.asarray(t.f(x), dtype=float))
            if not np.all(np.isfinite(val)):
                raise EvaluatorError(f"non-finite residual in task {t.name!r}")
            (eqs if t.kind == "eq" else ineqs).append(val)
        out.append(
            _LevelEval(
                f_eq=np.concatenate(eqs) if eqs else np.zeros(0),
                f_ineq=np.concatenate(ineqs) if ineqs else np.zeros(0),
            )
        )
    return out


def _eval_jacobian(task: NlTask, x: np.ndarray, n: int) -> sp.csr_array:
    j = task.jac(x)
    j = sp.csr_array(j) if sp.issparse(j) else sp.csr_array(np.atleast_2d(np.asarray(j, dtype=float)))
    if j.shape[1] != n:
        raise EvaluatorError(f"jacobian of task {task.name!r} has {j.shape[1]} columns, expected {n}")
    if j.nnz and not np.all(np.isfinite(j.data)):
        raise EvaluatorError(f"non-finite jacobian in task {task.name!r}")
    return j


def compute_h(problem: NlHierarchy, x: np.ndarray, frozen: list[FrozenLevel]) -> float:
    """l1 infeasibility of the converged levels against their frozen slacks."""
    h = 0.0
    evals = _eval_residuals(problem, x)
    for lv, fr in zip(evals, frozen):
        h += float(np.sum(np.abs(np.maximum(0.0, lv.f_ineq) - fr.v_ineq)))
        h += float(np.sum(np.abs(lv.f_eq - fr.v_eq)))
    return h


# -- hessian handling --------------------------------------------------

def clip_factor(h, floor: float = 1e-9) -> sp.csr_array:
    """Factor R with R^T R equal to ``h`` after eigenvalue clipping to >= floor.

    Clipping runs per connected component of the sparsity pattern, so
    variables the level never touches receive no rows.
    """
    hs = sp.csc_array(h) if not sp.issparse(h) else sp.csc_array(h)
    n = hs.shape[0]
    if hs.nnz == 0:
        return sp.csr_array((0, n))
    pattern = sp.csr_array((np.ones_like(hs.data), hs.indices, hs.indptr), shape=hs.shape)
    ncomp, labels = connected_components(pattern + pattern.T, directed=False)
    rows, cols, vals = [], [], []
    nrows = 0
    for comp in range(ncomp):
        idx = np.nonzero(labels == comp)[0]
        sub = hs[np.ix_(idx, idx)].toarray()
        sub = 0.5 * (sub + sub.T)
        if not np.any(sub):
            continue
        w, vecs = eigh(sub)
        r_blk = (vecs * np.sqrt(np.maximum(w, floor))).T
        for a in range(idx.size):
            for bcol in range(idx.size):
                val = r_blk[a, bcol]
                if abs(val) > 0.0:
                    rows.append(nrows + a)
                    cols.append(int(idx[bcol]))
                    vals.append(val)
        nrows += idx.size
    return sp.csr_array((vals, (rows, cols)), shape=(nrows, n))


@dataclass
class BfgsMemory:
    """Damped (Powell) BFGS approximation of one level's curvature."""

    b: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "BfgsMemory":
        return cls(np.eye(n))

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y))):
            self.b = np.eye(self.b.shape[0])
            return
        bs = self.b @ s
        sbs = float(s @ bs)
        if sbs <= 1e-14:
            return
        sy = float(s @ y)
        if sy < 0.2 * sbs:
            theta = 0.8 * sbs / (sbs - sy)
            y = theta * y + (1.0 - theta) * bs
            sy = float(s @ y)
        self.b = self.b - np.outer(bs, bs) / sbs + np.outer(y, y) / sy
        if not np.all(np.isfinite(self.b)):
            self.b = np.eye(self.b.shape[0])


def _level_weights(ev: _LevelEval) -> tuple[np.ndarray, np.ndarray]:
    """Multiplier estimates: residuals for equalities, violations for inequalities."""
    return ev.f_eq, np.maximum(0.0, ev.f_ineq)


def _lagrangian_gradient(tasks, x, n, w_eq, w_ineq):
    g = np.zeros(n)
    ie = ii = 0
    for t in tasks:
        j = _eval_jacobian(t, x, n)
        m = j.shape[0]
        if t.kind == "eq":
            g += j.T @ w_eq[ie : ie + m]
            ie += m
        else:
            g += j.T @ w_ineq[ii : ii + m]
            ii += m
    return g


def build_linearization(
    problem: NlHierarchy,
    x: np.ndarray,
    level: int,
    epsilon: float,
    bfgs_memory: BfgsMemory | None,
    mode: str,
    prev_v_norm: float | None = None,
    ev: _LevelEval | None = None,
    hessian_floor: float = 1e-9,
) -> HlspLevel:
    """Assemble one HLSP level at ``x``.

    The right-hand sides are the negated residuals, so the row model
    ``a . dx - b`` tracks ``f(x + dx)``.  Curvature-factor rows are appended
    only when the previous sub-problem left ``|v|^2 > epsilon`` on this
    level and the mode provides second-order information.
    """
    n = problem.n
    tasks = problem.levels[level - 1]
    if ev is None:
        ev = _eval_residuals(problem, x)[level - 1]
    j_eq, j_ineq = [], []
    for t in tasks:
        j = _eval_jacobian(t, x, n)
        (j_eq if t.kind == "eq" else j_ineq).append(j)
    a_eq = sp.csr_array(sp.vstack(j_eq)) if j_eq else sp.csr_array((0, n))
    a_ineq = sp.csr_array(sp.vstack(j_ineq)) if j_ineq else sp.csr_array((0, n))
    b_eq = -ev.f_eq
    b_ineq = -ev.f_ineq
    n_task_eq = a_eq.shape[0]

    mode = _canonical_mode(mode)
    # the switch compares the unsquared slack norm against epsilon: the
    # squared form would leave conflicts of size sqrt(epsilon) unaugmented
    # and let lower levels slide along the unprotected curvature directions
    augment = (
        mode != "gauss_newton_auto"
        and prev_v_norm is not None
        and prev_v_norm > epsilon
    )
    if augment:
        r = _curvature_rows(tasks, x, ev, mode, bfgs_memory, n, hessian_floor)
        if r is not None and r.shape[0]:
            a_eq = sp.csr_array(sp.vstack([a_eq, r]))
            b_eq = np.concatenate([b_eq, np.zeros(r.shape[0])])
    return HlspLevel.build(
        n, a_eq, b_eq, a_ineq, b_ineq, index=level, n_task_eq=n_task_eq
    )


def _curvature_rows(tasks, x, ev, mode, bfgs_memory, n, floor):
    if mode == "bfgs":
        if bfgs_memory is None:
            return None
        return clip_factor(bfgs_memory.b, floor)
    w_eq, w_ineq = _level_weights(ev)
    h = None
    ie = ii = 0
    for t in tasks:
        m = np.atleast_1d(t.f(x)).shape[0]
        if t.kind == "eq":
            w, ie = w_eq[ie : ie + m], ie + m
        else:
            w, ii = w_ineq[ii : ii + m], ii + m
        if t.weighted_hessian is None or not np.any(w):
            continue
        contrib = t.weighted_hessian(x, w)
        contrib = sp.csc_array(contrib) if not sp.issparse(contrib) else sp.csc_array(contrib)
        h = contrib if h is None else h + contrib
    if h is None or h.nnz == 0:
        return None
    return clip_factor(h, floor)


# -- the outer loop ----------------------------------------------------

def solve_nl_hlsp(problem: NlHierarchy, x0, settings: SolverSettings | None = None) -> NlSolveResult:
    """Drive every level of the hierarchy to a KKT point.

    Per level: linearize the whole hierarchy, solve it, and accept or
    reject the step with the level's filter until the step (or its
    restriction to the levels up to the current one) falls below chi.
    The converged slacks are then frozen and guarded through the
    infeasibility measure of all lower levels' filters.
    """
    if settings is None:
        settings = SolverSettings()
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise EvaluatorError("non-finite initial point")
    p = problem.p
    n = problem.n
    ipm_settings = settings.ipm()
    mode = _canonical_mode(settings.hessian_mode)

    frozen: list[FrozenLevel] = []
    filters = [Filter(l, settings.beta, settings.gamma) for l in range(1, p + 1)]
    bfgs = [BfgsMemory.identity(n) for _ in range(p)] if mode == "bfgs" else [None] * p
    prev_vnorm: list[float | None] = [None] * p
    # hysteresis on the curvature switch: once a level is augmented it stays
    # augmented until its slack falls a decade below epsilon, so levels
    # sitting at the threshold do not flicker between step characters
    aug_on = [False] * p
    trace: list[RunRecord] = []
    k = 1
    total_inner = 0
    total_time = 0.0
    status = "converged"
    last_solution: HlspSolution | None = None

    def linearize_all(xc, evals):
        out = []
        for j in range(p):
            eps_eff = settings.epsilon * (1e-4 if aug_on[j] else 1.0)
            out.append(
                build_linearization(
                    problem, xc, j + 1, eps_eff, bfgs[j], mode,
                    prev_vnorm[j], evals[j], settings.hessian_floor,
                )
            )
            aug_on[j] = (
                mode != "gauss_newton_auto"
                and prev_vnorm[j] is not None
                and prev_vnorm[j] > eps_eff
            )
        return out

    capped = False
    for l in range(1, p + 1):
        h_entry = compute_h(problem, x, frozen)
        filters[l - 1].reset()
        # the cap allows the irreducible infeasibility floor (frozen slacks
        # are chi-accurate estimates that later solves keep re-polishing)
        # plus an erosion allowance of a few chi on top
        h_floor = h_entry
        filters[l - 1].set_cap(settings.filter_cap_factor * settings.chi + 2.0 * h_floor)
        # converged levels keep the full radius for restoration steps; the
        # shadow-filtered levels below start at the adaptation floor so their
        # early pulls stay inside the current basin of attraction
        rho = np.full(p, settings.rho0)
        if settings.nstra:
            rho[l:] = settings.rho0 / settings.kappa
        inertia = np.zeros(p, dtype=int)
        # rejected radii cap the doubling until acceptances persist, which
        # stops the accept-double/reject-halve cycle along curved manifolds
        ceiling = settings.rho0
        ceiling_streak = 0
        while True:
            if k > settings.max_outer:
                status = "iteration_cap"
                capped = True
                break
            evals_x = _eval_residuals(problem, x)
            levels_lin = linearize_all(x, evals_x)
            radii = rho if settings.nstra else np.full(p, rho[l - 1])
            t0 = time.perf_counter()
            sol = solve_hlsp(levels_lin, radii, ipm_settings)
            dt = time.perf_counter() - t0
            total_time += dt
            total_inner += sol.inner_iterations
            last_solution = sol
            for j in range(p):
                prev_vnorm[j] = sol.v_star_norm(j + 1)
            dx = sol.dx
            step_sq = float(dx @ dx)
            step_norm = np.sqrt(step_sq)
            step_l_norm = float(np.linalg.norm(sol.dx_upto(l)))
            nnz_vec = np.array([lv.nnz for lv in sol.levels])

            if step_norm <= settings.chi or step_l_norm <= settings.chi:
                # apply the conforming below-threshold step, then freeze the
                # model slacks of the final solve: both sides then agree at
                # the new iterate up to second order
                x = x + dx
                lv_sol = sol.levels[l - 1]
                frozen.append(
                    FrozenLevel(lv_sol.v_eq.copy(), lv_sol.v_ineq.copy())
                )
                trace.append(
                    RunRecord(
                        k=k, hsf_level=l, accepted=False, converged_level=True,
                        h=compute_h(problem, x, frozen[:-1]),
                        f_plus=np.array([e.f_plus_norm() for e in evals_x]),
                        rho=radii.copy(), inner_iterations=sol.inner_iterations,
                        solve_time=dt, nnz=nnz_vec,
                        kkt_residual=sol.kkt_residual(),
                        step_norm=np.sqrt(step_sq),
                    )
                )
                k += 1
                break

            cand = x + dx
            evals_cand = _eval_residuals(problem, cand)
            h_cand = compute_h(problem, cand, frozen)
            if h_cand < h_floor:
                h_floor = h_cand
                filters[l - 1].set_cap(
                    settings.filter_cap_factor * settings.chi + 2.0 * h_floor
                )
            f_plus_cand = np.array([e.f_plus_norm() for e in evals_cand])
            g_l = f_plus_cand[l - 1]
            dq_l, df_l = reductions(
                levels_lin[l - 1], dx, evals_x[l - 1].f_plus_norm(), g_l
            )
            try:
                accepted, rho[l - 1] = step_filter_iterate(
                    filters[l - 1], h_cand, g_l, dq_l, df_l,
                    rho[l - 1], ceiling, settings.sigma, settings.rho_min,
                )
            except TrustRegionStall:
                status = "stalled"
                capped = True
                break
            if accepted:
                ceiling_streak += 1
                if ceiling_streak >= settings.inertia:
                    ceiling = min(settings.rho0, 2.0 * ceiling)
            else:
                ceiling = min(ceiling, max(rho[l - 1], settings.rho_min))
                ceiling_streak = 0
            if settings.nstra:
                for j in range(l + 1, p + 1):
                    g_j = f_plus_cand[j - 1]
                    dq_j, df_j = reductions(
                        levels_lin[j - 1], dx, evals_x[j - 1].f_plus_norm(), g_j
                    )
                    fj = filters[j - 1]
                    acc_j = filter_acceptable(fj, h_cand, g_j) and not (
                        dq_j > 0.0 and df_j < settings.sigma * dq_j
                    )
                    if acc_j and dq_j <= 0.0:
                        filter_add(fj, h_cand, g_j)
                    rho[j - 1], inertia[j - 1] = nstra_update(
                        rho[l - 1], rho[j - 1], settings.kappa, settings.chi,
                        acc_j, inertia[j - 1], settings.inertia,
                    )
            trace.append(
                RunRecord(
                    k=k, hsf_level=l, accepted=accepted, converged_level=False,
                    h=h_cand, f_plus=f_plus_cand, rho=radii.copy(),
                    inner_iterations=sol.inner_iterations, solve_time=dt,
                    nnz=nnz_vec, kkt_residual=sol.kkt_residual(),
                    step_norm=np.sqrt(step_sq),
                )
            )
            if accepted:
                if mode == "bfgs":
                    for j in range(p):
                        w_eq, w_ineq = _level_weights(evals_x[j])
                        g_old = _lagrangian_gradient(problem.levels[j], x, n, w_eq, w_ineq)
                        g_new = _lagrangian_gradient(problem.levels[j], cand, n, w_eq, w_ineq)
                        bfgs[j].update(dx, g_new - g_old)
                x = cand
            k += 1
        if capped:
            break

    while len(frozen) < p:
        ev = _eval_residuals(problem, x)[len(frozen)]
        frozen.append(FrozenLevel(ev.f_eq.copy(), np.maximum(0.0, ev.f_ineq)))
    multipliers = (
        [
            {
                "eq": lv.lam_eq,
                "ineq": lv.lam_ineq,
                "pool": lv.lam_pool,
                "active": lv.lam_active,
            }
            for lv in last_solution.levels
        ]
        if last_solution is not None
        else []
    )
    return NlSolveResult(
        x=x,
        v_star=frozen,
        multipliers=multipliers,
        trace=trace,
        converged=status == "converged",
        status=status,
        outer_iterations=k - 1,
        inner_iterations=total_inner,
        solve_time=total_time,
    )
