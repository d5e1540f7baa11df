"""Reduced-Hessian primal-dual interior-point solver for one linearized
hierarchical least-squares sub-problem.

Levels are processed in priority order.  Each level minimizes its slack
norms inside the nullspace of every constraint activated by higher levels;
inequalities of the level and the still-inactive inequalities inherited from
higher levels (including the level-0 trust-region bounds) are handled by a
log-barrier with a dual-feasibility line search.  At convergence of a level,
saturated inherited inequalities form a virtual level and are activated
first, then the level's own equalities and violated/saturated inequalities;
each activation batch extends the accumulated nullspace basis through the
turnback algorithm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .matrix_kernels import DROP_TOL, SparseMatrix, cholesky_solve
from .turnback import turnback_nullspace


class IpmError(RuntimeError):
    """The inner solver stalled or exceeded its iteration cap."""


class BarrierDomainError(RuntimeError):
    """An inactive inequality is infeasible, so the log barrier is undefined."""


@dataclass(frozen=True)
class IpmSettings:
    """Tunables of the sub-problem solver."""

    ipm_tol: float = 1e-10
    xi: float = 1e-8
    max_inner: int = 200
    fraction_to_boundary: float = 0.995
    centering: float = 0.1
    mu_floor: float = 1e-14
    stall_alpha: float = 1e-12
    pivot_tol: float = 1e-8
    recycle: bool = True
    dense_limit: int = 200_000
    pool_violation_tol: float = 1e-6
    recover_multipliers: bool = True
    #: tiny proximal weight anchoring each level's sub-step; selects the
    #: minimum-movement point of the level's optimal set
    primal_prox: float = 1e-8


@dataclass
class HlspLevel:
    """Linearized constraints of one priority level.

    Equality rows carry the task Jacobian rows first, then any appended
    curvature-factor rows (``n_task_eq`` marks the boundary).  The residual
    model of a row is ``a . dx - b``.
    """

    n: int
    a_eq: sp.csr_array
    b_eq: np.ndarray
    a_ineq: sp.csr_array
    b_ineq: np.ndarray
    index: int = 0
    n_task_eq: int | None = None

    @classmethod
    def build(cls, n, a_eq=None, b_eq=None, a_ineq=None, b_ineq=None,
              index=0, n_task_eq=None) -> "HlspLevel":
        a_eq = _as_csr(a_eq, n)
        a_ineq = _as_csr(a_ineq, n)
        b_eq = np.zeros(a_eq.shape[0]) if b_eq is None else np.asarray(b_eq, float)
        b_ineq = np.zeros(a_ineq.shape[0]) if b_ineq is None else np.asarray(b_ineq, float)
        if a_eq.shape[0] != b_eq.shape[0] or a_ineq.shape[0] != b_ineq.shape[0]:
            raise ValueError("constraint matrix/vector row mismatch")
        if a_eq.shape[1] != n or a_ineq.shape[1] != n:
            raise ValueError("constraint column count != n")
        if n_task_eq is None:
            n_task_eq = a_eq.shape[0]
        return cls(n, a_eq, b_eq, a_ineq, b_ineq, index, n_task_eq)

    @property
    def m_eq(self) -> int:
        return self.a_eq.shape[0]

    @property
    def m_ineq(self) -> int:
        return self.a_ineq.shape[0]


def _as_csr(a, n) -> sp.csr_array:
    if a is None:
        return sp.csr_array((0, n))
    if isinstance(a, SparseMatrix):
        return sp.csr_array(a.csc)
    if sp.issparse(a):
        return sp.csr_array(a)
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    return sp.csr_array(arr)


@dataclass
class ActiveSetState:
    """Active rows with frozen targets, the inactive pool, and the basis."""

    n: int
    rows: sp.csr_array
    rhs: np.ndarray
    targets: np.ndarray
    provenance: list[tuple]
    basis: sp.csc_array
    pool_rows: sp.csr_array
    pool_b: np.ndarray
    pool_prov: list[tuple]
    tr_active: np.ndarray  # (2n,) flags: [dx_i <= rho rows, -dx_i <= rho rows]

    @classmethod
    def initial(cls, n: int) -> "ActiveSetState":
        return cls(
            n=n,
            rows=sp.csr_array((0, n)),
            rhs=np.zeros(0),
            targets=np.zeros(0),
            provenance=[],
            basis=sp.eye_array(n, format="csc"),
            pool_rows=sp.csr_array((0, n)),
            pool_b=np.zeros(0),
            pool_prov=[],
            tr_active=np.zeros(2 * n, dtype=bool),
        )

    def nullspace_dim(self) -> int:
        return self.basis.shape[1]


@dataclass
class LevelSolution:
    """Per-level outcome of one sub-problem solve."""

    index: int
    v_eq: np.ndarray
    v_hess: np.ndarray
    v_ineq: np.ndarray
    sub_step: np.ndarray
    inner_iterations: int
    kkt_residual: float
    nnz: int
    skipped: bool
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    lam_pool: list[tuple]
    lam_active: list[tuple]
    activated: list[tuple]
    min_w_trace: list[float] = field(default_factory=list)

    def v_star(self) -> np.ndarray:
        return np.concatenate([self.v_eq, self.v_ineq])

    def v_star_norm(self) -> float:
        return float(np.linalg.norm(self.v_star()))


@dataclass
class HlspSolution:
    """Primal step, per-level slacks/multipliers, and active-set bookkeeping."""

    dx: np.ndarray
    levels: list[LevelSolution]
    active: ActiveSetState
    inner_iterations: int

    def sub_step(self, l: int) -> np.ndarray:
        return self.levels[l - 1].sub_step

    def dx_upto(self, l: int) -> np.ndarray:
        out = np.zeros_like(self.dx)
        for lv in self.levels[:l]:
            out += lv.sub_step
        return out

    def v_star_norm(self, l: int) -> float:
        return self.levels[l - 1].v_star_norm()

    def kkt_residual(self) -> float:
        return max((lv.kkt_residual for lv in self.levels), default=0.0)


# -- public operations ------------------------------------------------

def ipm_newton_step(c, r, basis=None) -> tuple[np.ndarray, np.ndarray]:
    """Solve the reduced normal equations (N^T C N) dz = N^T r.

    Returns ``(dz, dx)`` with ``dx = N dz``.  A missing basis means the
    identity; a basis with zero columns yields an empty step.
    """
    r = np.asarray(r, dtype=float)
    if isinstance(c, SparseMatrix):
        c = c.csc
    if basis is None:
        c_red = c.toarray() if sp.issparse(c) else np.asarray(c, float)
        dz, _ = cholesky_solve(c_red, r)
        return dz, dz.copy()
    nmat = basis.csc if isinstance(basis, SparseMatrix) else basis
    if nmat.shape[1] == 0:
        return np.zeros(0), np.zeros(nmat.shape[0])
    cn = c @ nmat
    c_red = nmat.T @ cn
    c_red = c_red.toarray() if sp.issparse(c_red) else np.asarray(c_red)
    rhs = nmat.T @ r
    dz, _ = cholesky_solve(c_red, rhs)
    return dz, nmat @ dz


def dual_line_search(v, dv, w, dw, wp, dwp, lp, dlp,
                     fraction_to_boundary: float = 0.995,
                     stall_alpha: float = 1e-12) -> float:
    """Largest damped step keeping v <= 0, w >= 0 and pool lambda, w >= 0."""
    alpha = 1.0
    with np.errstate(over="ignore", divide="ignore"):
        for cur, step in (((-v), (-dv)), (w, dw), (wp, dwp), (lp, dlp)):
            if cur.size == 0:
                continue
            blocking = step < 0.0
            if np.any(blocking):
                ratio = np.min(cur[blocking] / -step[blocking])
                alpha = min(alpha, fraction_to_boundary * ratio)
    if alpha < stall_alpha:
        raise IpmError(f"dual line search stalled (alpha={alpha:.3e})")
    return alpha


# -- internal level solve ---------------------------------------------

@dataclass
class _LevelWork:
    ap_rows: sp.csr_array
    ap_b: np.ndarray
    ap_prov: list[tuple]
    pinned_rows: sp.csr_array
    pinned_b: np.ndarray
    pinned_prov: list[tuple]
    s_eq: np.ndarray
    s_ineq: np.ndarray
    s_pool: np.ndarray
    v: np.ndarray
    w: np.ndarray
    wp: np.ndarray
    lp: np.ndarray
    inner: int
    kkt: float
    nnz: int
    skipped: bool
    min_w_trace: list[float]


def _densify_maybe(mat, limit):
    if mat.shape[0] * mat.shape[1] <= limit:
        return mat.toarray()
    return mat


def _normal_contrib(a, weights=None):
    """a^T diag(weights) a as a dense array."""
    if a.shape[0] == 0:
        return 0.0
    if sp.issparse(a):
        scaled = a.multiply(weights[:, None]) if weights is not None else a
        return (a.T @ scaled).toarray()
    scaled = a * weights[:, None] if weights is not None else a
    return a.T @ scaled


def _tvec(a, x):
    if a.shape[0] == 0:
        return 0.0
    return a.T @ x


def _assemble_pool(state: ActiveSetState, dx: np.ndarray, rho: float):
    """Inactive prior inequalities plus the still-inactive trust-region rows.

    The radius bounds the level's own movement: each bound is anchored at
    the accumulated step where the level starts, so it is strictly feasible
    (slack rho) at entry regardless of how the radii evolved above.
    """
    n = state.n
    rows = [state.pool_rows]
    bs = [state.pool_b]
    prov = list(state.pool_prov)
    data, ridx, cidx, tr_b = [], [], [], []
    k = 0
    for sign_block, sign in ((0, 1.0), (1, -1.0)):
        for i in range(n):
            if state.tr_active[sign_block * n + i]:
                continue
            data.append(sign)
            ridx.append(k)
            cidx.append(i)
            tr_b.append(rho + sign * dx[i])
            prov.append(("tr", i, int(sign)))
            k += 1
    if k:
        rows.append(sp.csr_array((data, (ridx, cidx)), shape=(k, n)))
        bs.append(np.array(tr_b))
    ap = sp.csr_array(sp.vstack(rows)) if len(rows) > 1 else rows[0]
    return ap, np.concatenate(bs), prov


def _solve_level(level: HlspLevel, state: ActiveSetState, dx: np.ndarray,
                 rho: float, settings: IpmSettings) -> _LevelWork:
    nmat = state.basis
    ap, bp, ap_prov = _assemble_pool(state, dx, rho)
    ae, be = level.a_eq, level.b_eq
    ai, bi = level.a_ineq, level.b_ineq

    aen = ae @ nmat
    ain = ai @ nmat
    s_eq = ae @ dx - be if level.m_eq else np.zeros(0)
    s_ineq = ai @ dx - bi if level.m_ineq else np.zeros(0)
    if aen.nnz == 0 and ain.nnz == 0:
        empty = sp.csr_array((0, level.n))
        return _LevelWork(ap, bp, ap_prov, empty, np.zeros(0), [],
                          s_eq, s_ineq, np.zeros(0),
                          np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0),
                          inner=0, kkt=0.0, nnz=0, skipped=True, min_w_trace=[])

    apn = ap @ nmat
    s_pool = ap @ dx - bp if ap.shape[0] else np.zeros(0)
    is_tr = np.array([p[0] == "tr" for p in ap_prov], dtype=bool)
    if s_pool.size:
        genuinely_violated = (s_pool > settings.pool_violation_tol) & ~is_tr
        if np.any(genuinely_violated):
            worst = int(np.argmax(np.where(genuinely_violated, s_pool, -np.inf)))
            raise BarrierDomainError(
                f"inactive constraint {ap_prov[worst]} violated by "
                f"{s_pool[worst]:.3e} at level {level.index}"
            )
    pinned_rows = sp.csr_array((0, level.n))
    pinned_b = np.zeros(0)
    pinned_prov: list[tuple] = []
    if ap.shape[0]:
        # rows entirely inside the active span cannot move: they stay
        # satisfied by construction and would only blow up the barrier
        row_reach = np.sqrt(np.asarray(apn.multiply(apn).sum(axis=1)).ravel())
        live = row_reach > 1e-12
        if not np.all(live):
            idx = np.nonzero(live)[0]
            dead = np.nonzero(~live)[0]
            keep_dead = [i for i in dead if ap_prov[i][0] != "tr"]
            if keep_dead:
                pinned_rows = sp.csr_array(ap[keep_dead, :])
                pinned_b = bp[keep_dead]
                pinned_prov = [ap_prov[i] for i in keep_dead]
            ap = sp.csr_array(ap[idx, :])
            bp = bp[idx]
            ap_prov = [ap_prov[i] for i in idx]
            apn = ap @ nmat
            s_pool = s_pool[idx]

    limit = settings.dense_limit
    aen = _densify_maybe(aen, limit)
    ain = _densify_maybe(ain, limit)
    apn = _densify_maybe(apn, limit)
    nnz_level = _nnz_of(aen) + _nnz_of(ain) + _nnz_of(apn)

    mi, mp = s_ineq.shape[0], s_pool.shape[0]
    scale0 = max(
        1.0,
        float(np.max(np.abs(be), initial=0.0)),
        float(np.max(np.abs(bi), initial=0.0)),
    )
    v_nat = np.minimum(0.0, -s_ineq) if mi else np.zeros(0)
    w_nat = np.maximum(0.0, -s_ineq) if mi else np.zeros(0)
    wp_nat = np.maximum(0.0, -s_pool) if mp else np.zeros(0)
    g_nat = _tvec(aen, s_eq) - _tvec(ain, v_nat)
    g_nat = np.asarray(g_nat).ravel() if np.ndim(g_nat) else np.zeros(nmat.shape[1])
    if np.linalg.norm(g_nat) <= settings.ipm_tol * scale0:
        work = _LevelWork(ap, bp, ap_prov, pinned_rows, pinned_b, pinned_prov,
                          s_eq, s_ineq, s_pool, v_nat, w_nat, wp_nat,
                          np.zeros(mp), inner=0,
                          kkt=float(np.linalg.norm(g_nat)), nnz=nnz_level,
                          skipped=False, min_w_trace=[])
        work.sub = np.zeros_like(dx)  # type: ignore[attr-defined]
        return work

    w = np.maximum(1.0, 1.0 - s_ineq) if mi else np.zeros(0)
    v = -s_ineq - w if mi else np.zeros(0)
    # start safely interior: rows at their bound get a unit slack and a
    # matching O(1) multiplier; the slack equation is restored by Newton
    wp = np.maximum(-s_pool, 1.0) if mp else np.zeros(0)
    lp = 1.0 / wp if mp else np.zeros(0)
    mu_i = float(np.mean(-v * w)) if mi else 0.0
    mu_p = 1.0 if mp else 0.0
    mu_i = max(mu_i, 1.0) if mi else 0.0

    scale = max(
        1.0,
        float(np.max(np.abs(be), initial=0.0)),
        float(np.max(np.abs(bi), initial=0.0)),
    )
    tol = settings.ipm_tol * scale
    sub = np.zeros_like(dx)
    zs = np.zeros(nmat.shape[1])
    prox = settings.primal_prox
    min_w_trace: list[float] = []
    sigma = settings.centering
    kkt = np.inf
    it = 0
    steps_in_stage = 0
    while True:
        gz = _tvec(aen, s_eq) - _tvec(ain, v) + _tvec(apn, lp)
        gz = np.asarray(gz).ravel() if np.ndim(gz) else np.zeros(nmat.shape[1])
        gz = gz + prox * zs
        f2 = -s_ineq - v - w
        f4 = -s_pool - wp
        comp_i = -v * w
        comp_p = lp * wp
        kkt = np.sqrt(
            float(gz @ gz) + float(f2 @ f2) + float(f4 @ f4)
            + float(comp_i @ comp_i) + float(comp_p @ comp_p)
        )
        if kkt <= tol:
            break
        import os as _os
        if _os.environ.get("NLHLSP_IPM_DEBUG") and it > settings.max_inner - 12:
            print(f"    dbg lvl={level.index} it={it} kkt={kkt:.2e} |g|={np.linalg.norm(gz):.2e} "
                  f"|f2|={np.max(np.abs(f2), initial=0):.1e} |f4|={np.max(np.abs(f4), initial=0):.1e} "
                  f"ci=[{comp_i.min() if mi else 0:.1e},{comp_i.max() if mi else 0:.1e}] "
                  f"cp=[{comp_p.min() if mp else 0:.1e},{comp_p.max() if mp else 0:.1e}] "
                  f"mu=({mu_i:.1e},{mu_p:.1e})")
        if it >= settings.max_inner:
            raise IpmError(
                f"level {level.index}: inner iteration cap {settings.max_inner} "
                f"exceeded (kkt={kkt:.3e}, tol={tol:.3e})"
            )
        barrier = np.sqrt(
            float(gz @ gz) + float(f2 @ f2) + float(f4 @ f4)
            + float((comp_i - mu_i) @ (comp_i - mu_i))
            + float((comp_p - mu_p) @ (comp_p - mu_p))
        )
        # shrink only once the current barrier problem is centered; a second
        # Newton pass per stage lets the duals catch up with the new target,
        # which is what pulls the unconstrained directions onto the path.
        # A centered state deviates by about mu per product, hence the
        # sqrt(m) allowance.
        centered = barrier <= max(mu_i, mu_p, tol) * 2.0 * np.sqrt(mi + mp + 1.0)
        if steps_in_stage >= 2 and centered:
            mu_i = max(sigma * mu_i, settings.mu_floor) if mi else 0.0
            mu_p = max(sigma * mu_p, settings.mu_floor) if mp else 0.0
            steps_in_stage = 0

        # centering safeguard: when the iterate drifts off-center (products
        # far above the stage target), aim at a fraction of the current
        # duality measure instead of fighting toward the stage value
        tgt_i = max(mu_i, sigma * float(np.mean(comp_i))) if mi else 0.0
        tgt_p = max(mu_p, sigma * float(np.mean(comp_p))) if mp else 0.0

        den = np.minimum(v - w, -1e-280)  # strictly negative in the domain
        sig_i = v / den if mi else np.zeros(0)
        t_i = (tgt_i + v * w + v * f2) / den if mi else np.zeros(0)
        wp_safe = np.maximum(wp, 1e-280)
        sig_p = np.minimum(lp / wp_safe, 1e18) if mp else np.zeros(0)
        t_p = (tgt_p - lp * wp - lp * f4) / wp_safe if mp else np.zeros(0)

        c_red = _normal_contrib(aen)
        c_red = c_red + _normal_contrib(ain, sig_i)
        c_red = c_red + _normal_contrib(apn, sig_p)
        if np.ndim(c_red) == 0:
            break
        c_red = c_red + prox * np.eye(nmat.shape[1])
        rhs = -gz
        if mi:
            rhs = rhs + np.asarray(_tvec(ain, t_i)).ravel()
        if mp:
            rhs = rhs - np.asarray(_tvec(apn, t_p)).ravel()
        dz, _ = cholesky_solve(np.asarray(c_red), rhs)
        ds_eq = (aen @ dz) if level.m_eq else np.zeros(0)
        ds_ineq = (ain @ dz) if mi else np.zeros(0)
        ds_pool = (apn @ dz) if mp else np.zeros(0)
        dv = t_i - sig_i * ds_ineq
        dw = -ds_ineq - dv + f2
        dwp = -ds_pool + f4
        dlp = t_p + sig_p * ds_pool
        alpha = dual_line_search(
            v, dv, w, dw, wp, dwp, lp, dlp,
            settings.fraction_to_boundary, settings.stall_alpha,
        )
        # keep the complementarity products near the target band: plain
        # Newton steps overshoot the bilinear terms and cycle otherwise
        comp0 = np.concatenate([comp_i, comp_p])
        tgt_vec = np.concatenate([np.full(mi, tgt_i), np.full(mp, tgt_p)])
        hi_band = np.maximum(4.0 * comp0, 4.0 * tgt_vec)
        lo_band = np.minimum(comp0, tgt_vec) / 4.0
        for _ in range(30):
            comp_a = np.concatenate(
                [
                    -(v + alpha * dv) * (w + alpha * dw),
                    (lp + alpha * dlp) * (wp + alpha * dwp),
                ]
            )
            if np.all(comp_a <= hi_band) and np.all(comp_a >= lo_band):
                break
            alpha *= 0.5
        dxz = nmat @ dz
        dx += alpha * dxz
        sub += alpha * dxz
        zs += alpha * dz
        s_eq = s_eq + alpha * ds_eq
        s_ineq = s_ineq + alpha * ds_ineq
        s_pool = s_pool + alpha * ds_pool
        v = np.minimum(v + alpha * dv, 0.0)
        w = np.maximum(w + alpha * dw, 1e-280)
        wp = np.maximum(wp + alpha * dwp, 1e-280)
        lp = np.maximum(lp + alpha * dlp, 0.0)
        if mi:
            min_w_trace.append(float(w.min()))
        if mp:
            min_w_trace.append(float(wp.min()))
        import os as _os2
        if _os2.environ.get("NLHLSP_IPM_DEBUG") and it > settings.max_inner - 12:
            print(f"      alpha={alpha:.2e}")
        it += 1
        steps_in_stage += 1
    work = _LevelWork(ap, bp, ap_prov, pinned_rows, pinned_b, pinned_prov,
                      s_eq, s_ineq, s_pool, v, w, wp, lp,
                      inner=it, kkt=kkt, nnz=nnz_level, skipped=False,
                      min_w_trace=min_w_trace)
    work.sub = sub  # type: ignore[attr-defined]
    return work


def _nnz_of(a) -> int:
    if sp.issparse(a):
        return a.nnz
    return int(np.count_nonzero(a))


def update_active_set(state: ActiveSetState, level: HlspLevel, work: _LevelWork,
                      xi: float, settings: IpmSettings) -> tuple[ActiveSetState, list[tuple]]:
    """Two-phase activation after a level converged.

    Phase one forms a virtual level from saturated inherited inequalities
    (w < xi and lambda > xi) and extends the basis; phase two activates the
    level's equalities plus its violated inequalities (w < xi and v < -xi)
    and extends the basis again.  Remaining inequalities stay in the pool.
    """
    n = state.n
    basis = state.basis
    rows_acc = [state.rows]
    rhs_acc = [state.rhs]
    targets_acc = [state.targets]
    prov_acc = list(state.provenance)
    tr_active = state.tr_active.copy()
    activated: list[tuple] = []

    def extend(rows_batch, rhs_batch, targets_batch, prov_batch):
        nonlocal basis
        if rows_batch.shape[0] == 0:
            return
        rows_acc.append(rows_batch)
        rhs_acc.append(rhs_batch)
        targets_acc.append(targets_batch)
        prov_acc.extend(prov_batch)
        activated.extend(prov_batch)
        projected = SparseMatrix(rows_batch @ basis)
        z = turnback_nullspace(
            projected, recycle=settings.recycle, pivot_tol=settings.pivot_tol
        )
        basis = sp.csc_array(basis @ z.z.csc)
        if basis.nnz:
            basis.data[np.abs(basis.data) < DROP_TOL] = 0.0
            basis.eliminate_zeros()

    # phase one: virtual level from the inherited pool
    pool_keep_rows = state.pool_rows
    pool_keep_b = state.pool_b
    pool_keep_prov = list(state.pool_prov)
    if work.s_pool.size:
        mask = (work.wp < xi) & (work.lp > xi)
        if np.any(mask):
            idx = np.nonzero(mask)[0]
            batch = sp.csr_array(work.ap_rows[idx, :])
            extend(batch, work.ap_b[idx], work.s_pool[idx],
                   [work.ap_prov[i] for i in idx])
            for i in idx:
                p = work.ap_prov[i]
                if p[0] == "tr":
                    block = 0 if p[2] > 0 else 1
                    tr_active[block * n + p[1]] = True
        keep, keep_b, keep_prov = [], [], []
        for i, p in enumerate(work.ap_prov):
            if mask.size and mask[i]:
                continue
            if p[0] == "tr":
                continue  # regenerated from flags each level
            keep.append(i)
            keep_b.append(work.ap_b[i])
            keep_prov.append(p)
        if keep:
            pool_keep_rows = sp.csr_array(work.ap_rows[np.array(keep), :])
            pool_keep_b = np.array(keep_b)
            pool_keep_prov = keep_prov
        else:
            pool_keep_rows = sp.csr_array((0, n))
            pool_keep_b = np.zeros(0)
            pool_keep_prov = []
        if work.pinned_rows.shape[0]:
            pool_keep_rows = sp.csr_array(
                sp.vstack([pool_keep_rows, work.pinned_rows])
            )
            pool_keep_b = np.concatenate([pool_keep_b, work.pinned_b])
            pool_keep_prov = pool_keep_prov + list(work.pinned_prov)

    # phase two: the level's own constraints
    if not work.skipped:
        eq_prov = [("eq", level.index, i) for i in range(level.n_task_eq)]
        eq_prov += [("hess", level.index, i) for i in range(level.n_task_eq, level.m_eq)]
        batch_rows = [level.a_eq] if level.m_eq else []
        batch_rhs = [level.b_eq] if level.m_eq else []
        batch_t = [work.s_eq] if level.m_eq else []
        batch_prov = list(eq_prov)
        new_pool_rows, new_pool_b, new_pool_prov = [], [], []
        if work.s_ineq.size:
            mask_b = (work.w < xi) & (work.v < -xi)
            act_idx = np.nonzero(mask_b)[0]
            if act_idx.size:
                batch_rows.append(sp.csr_array(level.a_ineq[act_idx, :]))
                batch_rhs.append(level.b_ineq[act_idx])
                batch_t.append(work.s_ineq[act_idx])
                batch_prov += [("ineq", level.index, int(i)) for i in act_idx]
            inact = np.nonzero(~mask_b)[0]
            if inact.size:
                new_pool_rows.append(sp.csr_array(level.a_ineq[inact, :]))
                new_pool_b.append(level.b_ineq[inact])
                new_pool_prov += [("ineq", level.index, int(i)) for i in inact]
        if batch_rows:
            joined = sp.csr_array(sp.vstack(batch_rows)) if len(batch_rows) > 1 else batch_rows[0]
            extend(joined, np.concatenate(batch_rhs), np.concatenate(batch_t),
                   batch_prov)
        if new_pool_rows:
            pool_keep_rows = sp.csr_array(sp.vstack([pool_keep_rows] + new_pool_rows))
            pool_keep_b = np.concatenate([pool_keep_b] + new_pool_b)
            pool_keep_prov = pool_keep_prov + new_pool_prov

    rows = sp.csr_array(sp.vstack(rows_acc)) if len(rows_acc) > 1 else rows_acc[0]
    new_state = ActiveSetState(
        n=n,
        rows=rows,
        rhs=np.concatenate(rhs_acc),
        targets=np.concatenate(targets_acc) if targets_acc else np.zeros(0),
        provenance=prov_acc,
        basis=basis,
        pool_rows=pool_keep_rows,
        pool_b=pool_keep_b,
        pool_prov=pool_keep_prov,
        tr_active=tr_active,
    )
    return new_state, activated


def _recover_multipliers(state: ActiveSetState, level: HlspLevel, work: _LevelWork):
    """Least-squares multipliers of the prior active rows for this level."""
    if state.rows.shape[0] == 0:
        return []
    g = np.zeros(state.n)
    if level.m_eq:
        g += level.a_eq.T @ work.s_eq
    if level.m_ineq:
        g -= level.a_ineq.T @ work.v
    if work.s_pool.size:
        g += work.ap_rows.T @ work.lp
    at = state.rows.T.toarray()
    lam, *_ = np.linalg.lstsq(at, -g, rcond=None)
    return list(zip(state.provenance, lam))


def solve_hlsp(levels: list[HlspLevel], trust_radii, settings: IpmSettings | None = None) -> HlspSolution:
    """Solve the full hierarchy for the primal step, slacks, and multipliers.

    ``trust_radii`` holds one positive radius per level; the level-0
    trust region enters as always-initially-inactive bound rows in the
    inherited pool.  Levels whose projected constraint matrices are empty
    are skipped without spending inner iterations.
    """
    if settings is None:
        settings = IpmSettings()
    if not levels:
        raise ValueError("at least one level is required")
    n = levels[0].n
    trust_radii = np.asarray(trust_radii, dtype=float)
    if trust_radii.shape[0] != len(levels):
        raise ValueError("one trust radius per level is required")
    if np.any(trust_radii <= 0.0):
        raise ValueError("trust radii must be positive")

    state = ActiveSetState.initial(n)
    dx = np.zeros(n)
    out_levels: list[LevelSolution] = []
    total_inner = 0
    for li, level in enumerate(levels):
        if level.n != n:
            raise ValueError("levels disagree on the variable count")
        work = _solve_level(level, state, dx, float(trust_radii[li]), settings)
        sub = getattr(work, "sub", np.zeros(n))
        lam_active = (
            _recover_multipliers(state, level, work)
            if settings.recover_multipliers and not work.skipped
            else []
        )
        lam_pool = [
            (p, float(val)) for p, val in zip(work.ap_prov, work.lp)
        ] if work.lp.size else []
        state, activated = update_active_set(state, level, work, settings.xi, settings)
        nte = level.n_task_eq
        out_levels.append(
            LevelSolution(
                index=level.index,
                v_eq=work.s_eq[:nte].copy(),
                v_hess=work.s_eq[nte:].copy(),
                v_ineq=np.maximum(0.0, work.s_ineq),
                sub_step=sub,
                inner_iterations=work.inner,
                kkt_residual=work.kkt,
                nnz=work.nnz,
                skipped=work.skipped,
                lam_eq=work.s_eq[:nte].copy(),
                lam_ineq=work.v.copy(),
                lam_pool=lam_pool,
                lam_active=lam_active,
                activated=activated,
                min_w_trace=work.min_w_trace,
            )
        )
        total_inner += work.inner
    return HlspSolution(dx=dx, levels=out_levels, active=state,
                        inner_iterations=total_inner)
