"""Sparse matrix storage and a rank-revealing LU with incremental column updates.

These kernels back the turnback nullspace computation and the interior-point
normal equations: a compressed-sparse-column container with Matrix Market
round-tripping, an updatable LU factorization that supports column addition,
removal, and non-permuting re-insertion, and a regularized Cholesky solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.io import mmread, mmwrite
from scipy.linalg import solve_triangular

#: Relative threshold under which a transformed column counts as dependent.
DEFAULT_PIVOT_TOL = 1e-8
#: Absolute magnitude under which stored values are dropped.
DROP_TOL = 1e-13
#: Threshold-pivoting stability bound: a pivot candidate must reach this
#: fraction of the best available magnitude before sparsity may prefer it.
PIVOT_STABILITY = 1e-2
#: Stored elimination entries may grow to this multiple of the tracked nnz
#: before the factorization is rebuilt from scratch.
REFACTOR_GROWTH = 5.0


class SingularMatrixError(RuntimeError):
    """A solve or factorization step met an unusably singular matrix."""


class SparseMatrix:
    """Compressed-sparse-column matrix with canonical, drop-filtered storage.

    Within each column the stored row indices are strictly increasing and no
    kept value is smaller in magnitude than ``drop_tol``.
    """

    __slots__ = ("csc",)

    def __init__(self, data, drop_tol: float = DROP_TOL):
        m = sp.csc_array(data, dtype=float)
        m.sum_duplicates()
        m.sort_indices()
        if m.nnz:
            m.data[np.abs(m.data) < drop_tol] = 0.0
            m.eliminate_zeros()
        self.csc = m

    # -- constructors -------------------------------------------------
    @classmethod
    def from_dense(cls, arr, drop_tol: float = DROP_TOL) -> "SparseMatrix":
        return cls(np.asarray(arr, dtype=float), drop_tol)

    @classmethod
    def from_coo(cls, shape, rows, cols, vals) -> "SparseMatrix":
        return cls(sp.coo_array((vals, (rows, cols)), shape=shape))

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(sp.eye_array(n, format="csc"))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "SparseMatrix":
        return cls(sp.csc_array((rows, cols)))

    # -- queries ------------------------------------------------------
    @property
    def rows(self) -> int:
        return self.csc.shape[0]

    @property
    def cols(self) -> int:
        return self.csc.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.csc.shape

    @property
    def nnz(self) -> int:
        return self.csc.nnz

    def col(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices and values of column ``j``."""
        a = self.csc
        lo, hi = a.indptr[j], a.indptr[j + 1]
        return a.indices[lo:hi], a.data[lo:hi]

    def to_dense(self) -> np.ndarray:
        return self.csc.toarray()

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.csc.data))) if self.csc.nnz else 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def save_matrix_market(path, a: SparseMatrix) -> None:
    """Write ``a`` in Matrix Market coordinate format."""
    mmwrite(str(path), sp.coo_array(a.csc))


def load_matrix_market(path) -> SparseMatrix:
    """Read a Matrix Market coordinate file into a SparseMatrix."""
    return SparseMatrix(sp.csc_array(mmread(str(path))))


@dataclass
class _Eta:
    """One recorded elimination: rows[k] -= mults[k] * row src."""

    src: int
    rows: np.ndarray
    mults: np.ndarray


class UpdatableLU:
    """Rank-revealing LU of a growing/shrinking column set.

    The lower factor is an append-only list of elimination operations; the
    upper factor is kept explicitly as the transformed columns, split
    implicitly into the nonsingular triangle U1 (pivot rows x pivot columns)
    and the remainder U2.  ``P A Q = L U`` holds for the tracked column set
    after any update sequence, up to the drop tolerance.  A full rebuild is
    triggered once the stored elimination entries exceed
    ``REFACTOR_GROWTH`` times the tracked nnz.
    """

    def __init__(self, nrows: int, pivot_tol: float = DEFAULT_PIVOT_TOL,
                 row_bias=None):
        self.m = int(nrows)
        self.pivot_tol = float(pivot_tol)
        self._orig: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._order: list[int] = []
        self._u: dict[int, np.ndarray] = {}
        self._etas: list[_Eta] = []
        self._eta_entries = 0
        self._pivot_rows: list[int] = []
        self._pivot_cols: list[int] = []
        self._row_is_pivot = np.zeros(self.m, dtype=bool)
        # sparsity tiebreak counts; a static bias (e.g. full-matrix row
        # counts) steers pivots onto structurally sparse rows from the start
        self._row_bias = (
            np.zeros(self.m, dtype=np.int64)
            if row_bias is None
            else np.asarray(row_bias, dtype=np.int64).copy()
        )
        self._row_nnz = self._row_bias.copy()
        self._next_id = 0
        self.n_transforms = 0
        self.n_removals = 0
        self.n_refactor = 0

    # -- queries ------------------------------------------------------
    @property
    def rank(self) -> int:
        return len(self._pivot_rows)

    @property
    def ncols(self) -> int:
        return len(self._order)

    @property
    def col_ids(self) -> list[int]:
        return list(self._order)

    @property
    def pivot_col_ids(self) -> list[int]:
        return list(self._pivot_cols)

    @property
    def nonpivot_col_ids(self) -> list[int]:
        pv = set(self._pivot_cols)
        return [c for c in self._order if c not in pv]

    @property
    def pivot_rows(self) -> list[int]:
        return list(self._pivot_rows)

    def is_pivot_col(self, col_id: int) -> bool:
        return col_id in self._pivot_cols

    def u1(self) -> np.ndarray:
        """Dense r x r upper-triangular block on (pivot rows, pivot cols)."""
        r = self.rank
        out = np.zeros((r, r))
        rows = self._pivot_rows
        for j, cid in enumerate(self._pivot_cols):
            out[:, j] = self._u[cid][rows]
        return out

    def u1_diag(self) -> np.ndarray:
        return np.array(
            [self._u[cid][row] for row, cid in zip(self._pivot_rows, self._pivot_cols)]
        )

    def u2_column(self, col_id: int) -> np.ndarray:
        """Coefficients of a dependent column on the pivot rows."""
        if col_id in self._pivot_cols:
            raise ValueError(f"column {col_id} is a pivot column")
        return self._u[col_id][self._pivot_rows].copy()

    def u2_residual(self, col_id: int) -> float:
        """Largest leftover magnitude of a stored column outside pivot rows."""
        v = self._u[col_id]
        free = ~self._row_is_pivot
        return float(np.max(np.abs(v[free]))) if free.any() else 0.0

    def condition_proxy(self) -> float:
        """Ratio of largest to smallest absolute U1 diagonal entry."""
        d = np.abs(self.u1_diag())
        if d.size == 0:
            return 1.0
        dmin = d.min()
        if dmin == 0.0:
            return np.inf
        return float(d.max() / dmin)

    # -- core update machinery ----------------------------------------
    def _transform(self, indices, values) -> np.ndarray:
        """Apply the recorded eliminations to a fresh column."""
        v = np.zeros(self.m)
        v[np.asarray(indices, dtype=int)] = values
        for eta in self._etas:
            s = v[eta.src]
            if s != 0.0:
                v[eta.rows] -= eta.mults * s
        v[np.abs(v) < DROP_TOL] = 0.0
        self.n_transforms += 1
        return v

    def _append_eta(self, src: int, rows: np.ndarray, mults: np.ndarray) -> None:
        if rows.size == 0:
            return
        self._etas.append(_Eta(src, rows, mults))
        self._eta_entries += rows.size
        for v in self._u.values():
            s = v[src]
            if s != 0.0:
                v[rows] -= mults * s

    def _choose_pivot(self, v: np.ndarray) -> int:
        """Threshold partial pivoting with a sparsity (Markowitz-style) tiebreak."""
        free = ~self._row_is_pivot
        mags = np.abs(v) * free
        best = mags.max()
        floor = max(self.pivot_tol * np.max(np.abs(v)), PIVOT_STABILITY * best)
        cand = np.nonzero(mags >= floor)[0]
        # fewest structural entries first, then larger magnitude, then index
        order = np.lexsort((cand, -mags[cand], self._row_nnz[cand]))
        return int(cand[order[0]])

    def _maybe_refactorize(self) -> None:
        total_nnz = sum(idx.size for idx, _ in self._orig.values())
        if self._eta_entries > REFACTOR_GROWTH * max(1, total_nnz):
            self._refactorize()

    def _refactorize(self) -> None:
        cols = list(self._order)
        orig = dict(self._orig)
        self._orig.clear()
        self._order.clear()
        self._u.clear()
        self._etas.clear()
        self._eta_entries = 0
        self._pivot_rows.clear()
        self._pivot_cols.clear()
        self._row_is_pivot[:] = False
        self._row_nnz = self._row_bias.copy()
        self.n_refactor += 1
        for cid in cols:
            idx, vals = orig[cid]
            self._insert(cid, idx, vals, allow_pivot=True, check_growth=False)

    def _insert(self, col_id, indices, values, allow_pivot, check_growth=True) -> int:
        if check_growth:
            self._maybe_refactorize()
        indices = np.asarray(indices, dtype=int)
        values = np.asarray(values, dtype=float)
        keep = np.abs(values) >= DROP_TOL
        indices, values = indices[keep], values[keep]
        v = self._transform(indices, values)
        colmax = np.max(np.abs(v)) if v.size else 0.0
        free = ~self._row_is_pivot
        best = np.max(np.abs(v) * free) if free.any() else 0.0
        dependent = colmax == 0.0 or best < self.pivot_tol * colmax
        if not dependent and not allow_pivot:
            raise SingularMatrixError(
                "non-permuting insertion of an independent column"
            )
        if not dependent:
            prow = self._choose_pivot(v)
            below = np.nonzero(free & (np.abs(v) >= DROP_TOL))[0]
            below = below[below != prow]
            self._append_eta(prow, below, v[below] / v[prow])
            v[below] = 0.0
            self._pivot_rows.append(prow)
            self._pivot_cols.append(col_id)
            self._row_is_pivot[prow] = True
        self._orig[col_id] = (indices, values)
        self._order.append(col_id)
        self._u[col_id] = v
        self._row_nnz[indices] += 1
        return self.rank

    def add_column(self, col, allow_pivot: bool = True, col_id: int | None = None) -> int:
        """Add a column; returns the rank afterwards.

        An unchanged rank signals that the column is linearly dependent on
        the tracked set.  With ``allow_pivot=False`` the column is stored
        without pivoting so that it lands in U2; that is a contract
        violation if the column is actually independent.
        """
        indices, values = _as_sparse_vector(col, self.m)
        if col_id is None:
            col_id = self._next_id
        if col_id in self._orig:
            raise ValueError(f"column id {col_id} already tracked")
        self._next_id = max(self._next_id, col_id) + 1
        return self._insert(col_id, indices, values, allow_pivot)

    def remove_column(self, col_id: int) -> int:
        """Remove a tracked column; returns the rank afterwards.

        Removing a pivot column sweeps its pivot row out of the remaining
        triangle and promotes a dependent column covering that row, if any,
        so the reported rank stays maximal.
        """
        if col_id not in self._orig:
            raise IndexError(f"column id {col_id} not in factorization")
        self.n_removals += 1
        idx, _ = self._orig.pop(col_id)
        self._row_nnz[idx] -= 1
        self._order.remove(col_id)
        if col_id not in self._pivot_cols:
            del self._u[col_id]
            return self.rank
        t = self._pivot_cols.index(col_id)
        srow = self._pivot_rows[t]
        del self._u[col_id]
        del self._pivot_cols[t]
        del self._pivot_rows[t]
        # sweep row `srow` out of the remaining pivot columns (left to right)
        for j in range(t, len(self._pivot_cols)):
            cid = self._pivot_cols[j]
            prow = self._pivot_rows[j]
            val = self._u[cid][srow]
            if abs(val) >= DROP_TOL:
                diag = self._u[cid][prow]
                self._append_eta(
                    prow, np.array([srow]), np.array([val / diag])
                )
                self._u[cid][srow] = 0.0
        self._row_is_pivot[srow] = False
        self._promote(srow)
        return self.rank

    def _promote(self, srow: int) -> None:
        """Re-pivot a dependent column onto a freed row, when one covers it."""
        best_cid, best_mag = None, 0.0
        pivset = set(self._pivot_cols)
        for cid in self._order:
            if cid in pivset:
                continue
            v = self._u[cid]
            mag = abs(v[srow])
            colmax = np.max(np.abs(v)) if v.size else 0.0
            if colmax > 0 and mag >= self.pivot_tol * colmax and mag > best_mag:
                best_cid, best_mag = cid, mag
        if best_cid is None:
            return
        v = self._u[best_cid]
        free = ~self._row_is_pivot
        free[srow] = False
        below = np.nonzero(free & (np.abs(v) >= DROP_TOL))[0]
        self._append_eta(srow, below, v[below] / v[srow])
        v[below] = 0.0
        self._pivot_rows.append(srow)
        self._pivot_cols.append(best_cid)
        self._row_is_pivot[srow] = True

    # -- solves and reconstruction ------------------------------------
    def solve_u1(self, rhs) -> np.ndarray:
        """Back-substitution with the r x r triangle U1."""
        rhs = np.asarray(rhs, dtype=float)
        r = self.rank
        if rhs.shape[0] != r:
            raise ValueError(f"rhs length {rhs.shape[0]} != rank {r}")
        if r == 0:
            return np.zeros(0)
        u1 = self.u1()
        if np.any(np.abs(np.diag(u1)) == 0.0):
            raise SingularMatrixError("U1 has a zero diagonal entry")
        return solve_triangular(u1, rhs, lower=False)

    def reconstruct_column(self, col_id: int) -> np.ndarray:
        """Apply L to the stored U column, recovering the original column."""
        v = self._u[col_id].copy()
        for eta in reversed(self._etas):
            v[eta.rows] += eta.mults * v[eta.src]
        return v

    def reconstruction_error(self) -> float:
        """Max abs deviation between L*U columns and the tracked originals."""
        err = 0.0
        for cid in self._order:
            a = np.zeros(self.m)
            idx, vals = self._orig[cid]
            a[idx] = vals
            err = max(err, float(np.max(np.abs(self.reconstruct_column(cid) - a))))
        return err


def _as_sparse_vector(col, m: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(col, tuple) and len(col) == 2:
        idx = np.asarray(col[0], dtype=int)
        vals = np.asarray(col[1], dtype=float)
    elif sp.issparse(col):
        c = sp.csc_array(col.reshape(m, 1))
        idx, vals = c.indices, c.data
    else:
        dense = np.asarray(col, dtype=float).ravel()
        if dense.size != m:
            raise ValueError(f"column length {dense.size} != rows {m}")
        idx = np.nonzero(dense)[0]
        vals = dense[idx]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise ValueError("row index out of range")
    return idx, vals


# -- spec-level operations --------------------------------------------

def lu_factorize(a: SparseMatrix, pivot_tol: float = DEFAULT_PIVOT_TOL) -> UpdatableLU:
    """Rank-revealing LU of all columns of ``a``, in column order."""
    f = UpdatableLU(a.rows, pivot_tol)
    for j in range(a.cols):
        idx, vals = a.col(j)
        f._insert(j, idx, vals, allow_pivot=True)
        f._next_id = j + 1
    return f


def lu_add_column(f: UpdatableLU, col) -> int:
    """Append a column; the returned rank is unchanged iff it is dependent."""
    return f.add_column(col, allow_pivot=True)


def lu_remove_column(f: UpdatableLU, col_id: int) -> int:
    """Drop a tracked column and report the resulting rank."""
    return f.remove_column(col_id)


def lu_add_column_nonpermuting(f: UpdatableLU, col, col_id: int | None = None) -> None:
    """Re-insert a dependent column so that it lands in U2, never pivoted."""
    f.add_column(col, allow_pivot=False, col_id=col_id)


def solve_u1(f: UpdatableLU, rhs) -> np.ndarray:
    """Solve U1 x = rhs by back substitution."""
    return f.solve_u1(rhs)


def cholesky_solve(m, rhs, sym_tol: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Solve the SPD system ``m x = rhs``; regularize on nonpositive pivots.

    Returns ``(x, regularized)`` where the flag reports whether a diagonal
    shift ``delta*I`` with ``delta = 1e-12 * (1 + max diag)`` was needed.
    """
    if isinstance(m, SparseMatrix):
        dense = m.to_dense()
    elif sp.issparse(m):
        dense = m.toarray()
    else:
        dense = np.asarray(m, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if dense.shape[0] != dense.shape[1]:
        raise ValueError("matrix is not square")
    scale = np.max(np.abs(dense)) if dense.size else 0.0
    if dense.size and np.max(np.abs(dense - dense.T)) > sym_tol * max(1.0, scale):
        raise ValueError("matrix is not symmetric")
    if dense.size == 0:
        return np.zeros(0), False
    try:
        c = np.linalg.cholesky(dense)
        x = solve_triangular(c.T, solve_triangular(c, rhs, lower=True), lower=False)
        return x, False
    except np.linalg.LinAlgError:
        pass
    delta = 1e-12 * (1.0 + float(np.max(np.diag(dense), initial=0.0)))
    for _ in range(40):
        try:
            c = np.linalg.cholesky(dense + delta * np.eye(dense.shape[0]))
            x = solve_triangular(c.T, solve_triangular(c, rhs, lower=True), lower=False)
            return x, True
        except np.linalg.LinAlgError:
            delta *= 10.0
    raise SingularMatrixError("matrix not positive definite after regularization cap")
