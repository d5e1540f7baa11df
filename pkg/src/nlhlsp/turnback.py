"""Band-preserving nullspace bases via a recycling turnback algorithm.

Given a (typically banded) matrix A, each nullspace column is obtained from a
small window of columns of A that just reaches linear dependence; consecutive
windows overlap, so the LU factorization of one window is recycled into the
next through column additions and removals instead of being rebuilt.
A dense-fallback basis built directly from the LU factors is provided for
comparison.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .matrix_kernels import (
    DEFAULT_PIVOT_TOL,
    DROP_TOL,
    SparseMatrix,
    UpdatableLU,
    lu_factorize,
)

#: Window overlap ratio below which recycling is not worthwhile.
MIN_OVERLAP = 0.5
#: U1 diagonal spread above which dependence detection keeps augmenting.
COND_MAX = 1e8


class TurnbackError(RuntimeError):
    """A bracket could not be completed; the input violated assumptions."""


@dataclass
class TurnbackPlan:
    """Bracket layout for the turnback sweep.

    ``b[i]`` is the start column of null-vector ``i``, ``p_v[i]`` the pivot
    column receiving its unit entry, and the scan direction is shared by all
    brackets.
    """

    b: np.ndarray
    p_v: np.ndarray
    direction: str
    rank: int


@dataclass
class TurnbackStats:
    col_add: int = 0
    col_remove: int = 0
    refactorizations: int = 0
    fresh_factorizations: int = 0
    brackets: int = 0
    bracket_cond: list[float] = field(default_factory=list)
    bracket_exhausted: list[bool] = field(default_factory=list)

    @property
    def column_ops(self) -> int:
        return self.col_add + self.col_remove


@dataclass
class NullspaceBasis:
    """A matrix Z with A Z = 0 and full column rank.

    For turnback bases the rows at the plan's pivot columns form, in
    bracket order, a unit-triangular block: column i has a 1 at row
    p_v[i] and zeros at the pivot rows of all earlier brackets, which
    certifies rank(Z) = n - r exactly.
    """

    z: SparseMatrix
    tag: str
    stats: TurnbackStats | None = None
    plan: "TurnbackPlan | None" = None

    @property
    def cols(self) -> int:
        return self.z.cols


def lu_nullspace(a: SparseMatrix, pivot_tol: float = DEFAULT_PIVOT_TOL) -> NullspaceBasis:
    """Dense-fallback basis Z = Q [-U1^{-1} U2; I] from one LU factorization."""
    n = a.cols
    f = lu_factorize(a, pivot_tol)
    nonpiv = f.nonpivot_col_ids
    k = len(nonpiv)
    if k == 0:
        return NullspaceBasis(SparseMatrix.zeros(n, 0), "lu_dense")
    rows, cols, vals = [], [], []
    piv = f.pivot_col_ids
    if f.rank:
        u2 = np.column_stack([f.u2_column(c) for c in nonpiv])
        w = np.column_stack([f.solve_u1(u2[:, j]) for j in range(k)])
        for t, cid in enumerate(piv):
            for j in range(k):
                if abs(w[t, j]) >= DROP_TOL:
                    rows.append(cid)
                    cols.append(j)
                    vals.append(-w[t, j])
    for j, cid in enumerate(nonpiv):
        rows.append(cid)
        cols.append(j)
        vals.append(1.0)
    z = SparseMatrix.from_coo((n, k), rows, cols, vals)
    return NullspaceBasis(z, "lu_dense")


def get_max_rank(a: SparseMatrix, start_col: int, direction: str) -> int:
    """Greedy count of columns from ``start_col`` with a fresh pivot row.

    Scanning in the given direction, each column claims the first of its
    structural rows not claimed before; the count stops at the first column
    that cannot claim a new row.  This sizes the initial turnback window.
    """
    if start_col >= a.cols:
        raise IndexError("start column out of range")
    step = 1 if direction == "right" else -1
    claimed = np.zeros(a.rows, dtype=bool)
    count = 0
    j = start_col
    while 0 <= j < a.cols:
        idx, vals = a.col(j)
        fresh = None
        for i, v in zip(idx, vals):
            if abs(v) >= DROP_TOL and not claimed[i]:
                fresh = i
                break
        if fresh is None:
            break
        claimed[fresh] = True
        count += 1
        j += step
    return count


def _row_counts(a: SparseMatrix) -> np.ndarray:
    return np.diff(sp.csr_array(a.csc).indptr)


def _factorize_ordered(a: SparseMatrix, pivot_tol: float, order) -> UpdatableLU:
    f = UpdatableLU(a.rows, pivot_tol, row_bias=_row_counts(a))
    for j in order:
        idx, vals = a.col(int(j))
        f.add_column((idx, vals), col_id=int(j))
    return f


def _plan_candidate(a: SparseMatrix, f: UpdatableLU, direction: str | None):
    """Raw (direction, b, p_v, score) estimate from one factorization."""
    nonpiv = f.nonpivot_col_ids
    piv = np.array(f.pivot_col_ids, dtype=int)
    supports = []
    for cid in nonpiv:
        rows = [cid]
        if f.rank:
            u2 = f.u2_column(cid)
            rows.extend(int(piv[t]) for t in np.nonzero(np.abs(u2) >= DROP_TOL)[0])
        supports.append(rows)
    b_right = np.array([min(s) for s in supports], dtype=int)
    b_left = np.array([max(s) for s in supports], dtype=int)

    def doubles(v):
        return v.size - np.unique(v).size

    if direction is None:
        direction = "right"
        if doubles(b_right) > 0 and doubles(b_left) < doubles(b_right):
            direction = "left"
    b = b_right if direction == "right" else b_left
    p_v = np.array(nonpiv, dtype=int)
    spread = float(np.mean(np.abs(p_v - b))) if b.size else 0.0
    return direction, b, p_v, (doubles(b), spread)


def _arrange(n: int, direction: str, b: np.ndarray, p_v: np.ndarray, rank: int) -> TurnbackPlan:
    k = b.size
    if direction == "right":
        b = np.sort(b)
        p_v = np.sort(p_v)
        b[0] = 0
        for i in range(1, k):
            b[i] = min(max(b[i], p_v[i - 1]), p_v[i])
    else:
        b = -np.sort(-b)
        p_v = -np.sort(-p_v)
        b[0] = n - 1
        for i in range(1, k):
            b[i] = max(min(b[i], p_v[i - 1]), p_v[i])
    return TurnbackPlan(b, p_v, direction, rank)


def _candidate_plans(a: SparseMatrix, pivot_tol: float) -> list[TurnbackPlan]:
    """Scored candidate plans over several factorization column orders.

    The order decides which columns come out dependent and so where the
    null-vector windows sit; natural, nnz-descending, and nnz-ascending
    orders are tried and ranked by duplicate start columns, then by
    pivot-to-start spread.  Each candidate is followed by its
    flipped-direction twin as a fallback.
    """
    n = a.cols
    nnz_per_col = np.diff(a.csc.indptr)
    scored = []
    for order in (
        np.arange(n),
        np.argsort(-nnz_per_col, kind="stable"),
        np.argsort(nnz_per_col, kind="stable"),
    ):
        f = _factorize_ordered(a, pivot_tol, order)
        if f.rank == f.ncols:
            return [TurnbackPlan(np.zeros(0, dtype=int), np.zeros(0, dtype=int),
                                 "right", f.rank)]
        direction, b, p_v, score = _plan_candidate(a, f, None)
        scored.append((score, 0, direction, b, p_v, f.rank))
        flipped = "left" if direction == "right" else "right"
        d2, b2, p_v2, score2 = _plan_candidate(a, f, flipped)
        scored.append((score2, 1, d2, b2, p_v2, f.rank))
    scored.sort(key=lambda t: (t[1], t[0]))
    plans = []
    seen = set()
    for _, _, direction, b, p_v, rank in scored:
        key = (direction, tuple(np.sort(p_v)))
        if key in seen:
            continue
        seen.add(key)
        plans.append(_arrange(n, direction, b.copy(), p_v.copy(), rank))
    return plans


def find_index_vectors(
    a: SparseMatrix,
    pivot_tol: float = DEFAULT_PIVOT_TOL,
) -> TurnbackPlan:
    """Best-scored bracket layout; see ``_candidate_plans`` for the ranking."""
    return _candidate_plans(a, pivot_tol)[0]


class _Window:
    """LU factorization of a moving column window of A."""

    def __init__(self, a: SparseMatrix, pivot_tol: float, stats: TurnbackStats):
        self.a = a
        self.pivot_tol = pivot_tol
        self.stats = stats
        self.row_bias = _row_counts(a)
        self.f: UpdatableLU | None = None
        self._counted_transforms = 0
        self._counted_removals = 0

    def _sync_stats(self) -> None:
        if self.f is None:
            return
        self.stats.col_add += self.f.n_transforms - self._counted_transforms
        self.stats.col_remove += self.f.n_removals - self._counted_removals
        self._counted_transforms = self.f.n_transforms
        self._counted_removals = self.f.n_removals

    def fresh(self, cols) -> None:
        self._sync_stats()
        self.f = UpdatableLU(self.a.rows, self.pivot_tol, row_bias=self.row_bias)
        self._counted_transforms = 0
        self._counted_removals = 0
        self.stats.fresh_factorizations += 1
        for c in cols:
            self.add(c)

    def add(self, col: int, allow_pivot: bool = True) -> int:
        idx, vals = self.a.col(col)
        rank = self.f.add_column((idx, vals), allow_pivot=allow_pivot, col_id=col)
        self.stats.refactorizations = max(self.stats.refactorizations, self.f.n_refactor)
        self._sync_stats()
        return rank

    def remove(self, col: int) -> int:
        rank = self.f.remove_column(col)
        self._sync_stats()
        return rank

    @property
    def tracked(self) -> set[int]:
        return set(self.f.col_ids)


def turnback_nullspace(
    a: SparseMatrix,
    recycle: bool = True,
    pivot_tol: float = DEFAULT_PIVOT_TOL,
    cond_max: float = COND_MAX,
    min_overlap: float = MIN_OVERLAP,
    plan: TurnbackPlan | None = None,
) -> NullspaceBasis:
    """Sparse nullspace basis of ``a`` by the recycling turnback sweep.

    Each bracket grows a contiguous column window from its start column
    until a dependent column appears (continuing while the U1 diagonal
    spread exceeds ``cond_max``), maneuvers the bracket's own pivot column
    into U2, and reads the null-vector off one triangular solve.  Windows
    never contain the pivot columns of already-finished brackets and the
    growth phase skips all pivot columns, so each of those is used by
    exactly one basis column.  With ``recycle=False`` every bracket
    factorizes its window from scratch.
    """
    n = a.cols
    stats = TurnbackStats()
    if n == 0:
        return NullspaceBasis(SparseMatrix.zeros(0, 0), "turnback", stats)
    if a.rows == 0 or a.nnz == 0:
        return NullspaceBasis(SparseMatrix.identity(n), "identity", stats)
    if plan is not None:
        return _sweep(a, plan, recycle, pivot_tol, cond_max, min_overlap, stats)
    plans = _candidate_plans(a, pivot_tol)
    last_error = None
    for cand in plans:
        try:
            return _sweep(a, cand, recycle, pivot_tol, cond_max, min_overlap,
                          TurnbackStats())
        except TurnbackError as exc:
            last_error = exc
    raise last_error


def _sweep(a, plan, recycle, pivot_tol, cond_max, min_overlap, stats) -> NullspaceBasis:
    n = a.cols
    k = n - plan.rank
    if k == 0:
        return NullspaceBasis(SparseMatrix.zeros(n, 0), "turnback", stats, plan)
    right = plan.direction == "right"
    sgn = 1 if right else -1
    pvset = set(int(p) for p in plan.p_v)
    done_pv: set[int] = set()
    rows_out, cols_out, vals_out = [], [], []
    win = _Window(a, pivot_tol, stats)
    prev_start = None
    prev_end = None

    for i in range(k):
        stats.brackets += 1
        bi = int(plan.b[i])
        pvi = int(plan.p_v[i])
        b_next = int(plan.b[i + 1]) if i + 1 < k else (n - 1 if right else 0)
        span = max(get_max_rank(a, bi, plan.direction), abs(b_next - bi))
        c = min(max(bi + sgn * span, 0), n - 1)

        use_fresh = not recycle or win.f is None or i == 0
        if not use_fresh:
            denom = max(abs(prev_end - prev_start), 1)
            use_fresh = abs(c - bi) / denom < min_overlap
        lo, hi = (bi, c) if right else (c, bi)
        if use_fresh:
            win.fresh(j for j in range(lo, hi + 1) if j not in done_pv)
        else:
            drop = [
                cid
                for cid in win.f.col_ids
                if (cid < bi if right else cid > bi) or cid in done_pv
            ]
            for cid in drop:
                win.remove(cid)
            tracked = win.tracked
            for j in range(lo, hi + 1):
                if j not in tracked and j not in done_pv:
                    win.add(j)
        frontier = max(win.tracked, default=bi) if right else min(win.tracked, default=bi)
        additions = 0
        need_more = False
        extracted = False
        while not extracted:
            nxt = frontier + sgn
            while 0 <= nxt < n and (nxt in done_pv or nxt in win.tracked):
                nxt += sgn
            exhausted = not (0 <= nxt < n)
            lin_dep = win.f.rank < win.f.ncols
            if (
                lin_dep
                and not need_more
                and (exhausted or win.f.condition_proxy() <= cond_max)
            ):
                if not win.f.is_pivot_col(pvi):
                    stats.bracket_cond.append(win.f.condition_proxy())
                    stats.bracket_exhausted.append(exhausted)
                    coeff = win.f.solve_u1(win.f.u2_column(pvi))
                    for t, cid in enumerate(win.f.pivot_col_ids):
                        if abs(coeff[t]) >= DROP_TOL:
                            rows_out.append(cid)
                            cols_out.append(i)
                            vals_out.append(-coeff[t])
                    rows_out.append(pvi)
                    cols_out.append(i)
                    vals_out.append(1.0)
                    extracted = True
                    continue
                r_hat = win.f.rank
                if win.remove(pvi) == r_hat:
                    # remaining columns still span the pivot column
                    win.add(pvi, allow_pivot=False)
                    continue
                # the pivot column is still essential here: restore it and
                # grow the window before trying again
                win.add(pvi)
                need_more = True
            if exhausted:
                raise TurnbackError(
                    f"bracket {i} (pivot column {pvi}) exhausted all columns "
                    "before reaching linear dependence"
                )
            additions += 1
            if additions > n:
                raise TurnbackError(f"bracket {i} exceeded the window extension cap")
            win.add(nxt)
            need_more = False
            frontier = nxt
        done_pv.add(pvi)
        prev_start = bi
        prev_end = frontier
    z = SparseMatrix.from_coo((n, k), rows_out, cols_out, vals_out)
    return NullspaceBasis(z, "turnback", stats, plan)
