"""Kernels: sparse container, updatable LU, regularized Cholesky."""
import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import solve_triangular

from nlhlsp.matrix_kernels import (
    SparseMatrix,
    cholesky_solve,
    load_matrix_market,
    lu_add_column,
    lu_add_column_nonpermuting,
    lu_factorize,
    lu_remove_column,
    save_matrix_market,
    solve_u1,
    SingularMatrixError,
)
from nlhlsp.problems import make_banded_ocp_matrix


def dense_rank(a, tol=1e-9):
    """Independent rank oracle via dense SVD."""
    return np.linalg.matrix_rank(a, tol=tol)


class TestSparseMatrix:
    def test_invariants(self):
        a = SparseMatrix.from_dense([[1.0, 0.0, 2.0], [0.0, 1e-16, 3.0]])
        assert a.shape == (2, 3)
        assert a.nnz == 3  # the 1e-16 entry is dropped
        for j in range(a.cols):
            idx, _ = a.col(j)
            assert np.all(np.diff(idx) > 0)

    def test_coo_duplicates_summed(self):
        a = SparseMatrix.from_coo((2, 2), [0, 0], [0, 0], [1.0, 2.0])
        assert a.to_dense()[0, 0] == 3.0
        assert a.nnz == 1

    def test_matrix_market_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        dense = rng.normal(size=(6, 4)) * (rng.random((6, 4)) > 0.5)
        a = SparseMatrix.from_dense(dense)
        path = tmp_path / "fixture.mtx"
        save_matrix_market(path, a)
        b = load_matrix_market(path)
        np.testing.assert_allclose(b.to_dense(), a.to_dense(), atol=1e-14)


class TestLuFactorize:
    def test_identity(self):
        f = lu_factorize(SparseMatrix.identity(3))
        assert f.rank == 3
        np.testing.assert_allclose(f.u1(), np.eye(3))
        assert f.nonpivot_col_ids == []

    def test_rank_one(self):
        f = lu_factorize(SparseMatrix.from_dense([[1.0, 2.0], [2.0, 4.0]]))
        assert f.rank == 1
        assert len(f.nonpivot_col_ids) == 1

    def test_banded_full_row_rank(self):
        a = make_banded_ocp_matrix(12, 3, 10, seed=0)
        assert a.shape == (120, 150)
        f = lu_factorize(a)
        assert f.rank == dense_rank(a.to_dense()) == 120

    def test_reconstruction_invariant(self):
        rng = np.random.default_rng(3)
        dense = rng.normal(size=(12, 9))
        a = SparseMatrix.from_dense(dense)
        f = lu_factorize(a)
        assert f.reconstruction_error() <= 1e-10 * np.max(np.abs(dense))

    def test_zero_matrix_rank_zero(self):
        f = lu_factorize(SparseMatrix.zeros(3, 2))
        assert f.rank == 0


class TestColumnUpdates:
    def test_add_orthogonal_column(self):
        f = lu_factorize(SparseMatrix.from_dense([[1.0], [0.0]]))
        assert f.rank == 1
        assert lu_add_column(f, np.array([0.0, 1.0])) == 2

    def test_add_dependent_column(self):
        f = lu_factorize(SparseMatrix.from_dense([[1.0], [0.0]]))
        assert lu_add_column(f, np.array([2.0, 0.0])) == 1

    def test_add_column_banded_submatrix(self):
        a = make_banded_ocp_matrix(12, 3, 10, seed=1)
        dense = a.to_dense()
        sub = SparseMatrix.from_dense(dense[:, :15])
        f = lu_factorize(sub)
        r_before = f.rank
        r_after = lu_add_column(f, dense[:, 15])
        assert r_after == dense_rank(dense[:, :16])
        assert r_after == r_before + 1

    def test_dimension_mismatch(self):
        f = lu_factorize(SparseMatrix.identity(2))
        with pytest.raises(ValueError):
            lu_add_column(f, np.ones(3))

    def test_remove_dependent_column(self):
        f = lu_factorize(SparseMatrix.from_dense([[1.0, 2.0], [2.0, 4.0]]))
        dep = f.nonpivot_col_ids[0]
        assert lu_remove_column(f, dep) == 1

    def test_remove_pivot_of_identity(self):
        f = lu_factorize(SparseMatrix.identity(2))
        assert lu_remove_column(f, f.pivot_col_ids[0]) == 1

    def test_remove_out_of_range(self):
        f = lu_factorize(SparseMatrix.identity(2))
        with pytest.raises(IndexError):
            lu_remove_column(f, 99)

    def test_remove_then_readd_restores_rank(self):
        rng = np.random.default_rng(11)
        dense = rng.normal(size=(10, 12))
        assert dense_rank(dense) == 10
        for col in [0, 5, 11]:
            f = lu_factorize(SparseMatrix.from_dense(dense))
            assert f.rank == 10
            lu_remove_column(f, col)
            assert lu_add_column(f, dense[:, col]) == 10

    def test_remove_pivot_with_promotion_keeps_rank(self):
        rng = np.random.default_rng(4)
        dense = rng.normal(size=(4, 6))
        f = lu_factorize(SparseMatrix.from_dense(dense))
        assert f.rank == 4
        # 5 columns remain: rank stays 4 via promotion of a dependent column
        assert lu_remove_column(f, f.pivot_col_ids[0]) == 4

    def test_update_sequence_keeps_reconstruction(self):
        rng = np.random.default_rng(12)
        dense = rng.normal(size=(8, 6)) * (rng.random((8, 6)) > 0.3)
        f = lu_factorize(SparseMatrix.from_dense(dense))
        extra = rng.normal(size=8) * (rng.random(8) > 0.3)
        cid = f.ncols
        lu_add_column(f, extra)
        lu_remove_column(f, 2)
        lu_remove_column(f, f.pivot_col_ids[0])
        scale = max(np.max(np.abs(dense)), np.max(np.abs(extra)))
        assert f.reconstruction_error() <= 1e-10 * scale
        assert cid in f.col_ids


class TestNonPermutingAdd:
    def test_dependent_lands_in_u2(self):
        f = lu_factorize(SparseMatrix.from_dense([[1.0], [0.0]]))
        lu_add_column_nonpermuting(f, np.array([2.0, 0.0]))
        cid = f.nonpivot_col_ids[0]
        np.testing.assert_allclose(f.u2_column(cid), [2.0])

    def test_zero_column(self):
        f = lu_factorize(SparseMatrix.identity(2))
        lu_add_column_nonpermuting(f, np.zeros(2))
        assert f.rank == 2
        assert len(f.nonpivot_col_ids) == 1

    def test_independent_column_is_contract_violation(self):
        f = lu_factorize(SparseMatrix.from_dense([[1.0], [0.0]]))
        with pytest.raises(SingularMatrixError):
            lu_add_column_nonpermuting(f, np.array([0.0, 1.0]))


class TestSolveU1:
    def test_identity(self):
        f = lu_factorize(SparseMatrix.identity(2))
        np.testing.assert_allclose(solve_u1(f, [1.0, 2.0]), [1.0, 2.0])

    def test_hand_back_substitution(self):
        # A = [U1 U2] with U1 = [[1,1],[0,1]]: solve U1 x = [1,1] -> [0,1]
        a = SparseMatrix.from_dense([[1.0, 1.0], [0.0, 1.0]])
        f = lu_factorize(a)
        if np.allclose(f.u1(), [[1.0, 1.0], [0.0, 1.0]]):
            np.testing.assert_allclose(solve_u1(f, [1.0, 1.0]), [0.0, 1.0])
        x = solve_u1(f, [1.0, 1.0])
        np.testing.assert_allclose(f.u1() @ x, [1.0, 1.0], atol=1e-12)

    def test_random_upper_triangular_vs_dense_oracle(self):
        rng = np.random.default_rng(5)
        u = np.triu(rng.normal(size=(5, 5))) + 5.0 * np.eye(5)
        f = lu_factorize(SparseMatrix.from_dense(u))
        rhs = rng.normal(size=5)
        got = solve_u1(f, rhs)
        oracle = solve_triangular(f.u1(), rhs, lower=False)
        assert np.linalg.norm(got - oracle) <= 1e-12 * max(1.0, np.linalg.norm(oracle))
        np.testing.assert_allclose(
            f.u1() @ got, rhs, atol=1e-10 * max(1.0, np.max(np.abs(rhs)))
        )

    def test_wrong_length(self):
        f = lu_factorize(SparseMatrix.identity(3))
        with pytest.raises(ValueError):
            solve_u1(f, [1.0])


class TestCholeskySolve:
    def test_scaled_identity(self):
        x, reg = cholesky_solve(SparseMatrix.from_dense(2.0 * np.eye(3)), [2.0, 4.0, 6.0])
        np.testing.assert_allclose(x, [1.0, 2.0, 3.0])
        assert not reg

    def test_two_by_two(self):
        x, _ = cholesky_solve(np.array([[4.0, 2.0], [2.0, 3.0]]), [8.0, 7.0])
        np.testing.assert_allclose(x, [1.25, 1.5])

    def test_zero_matrix_regularized(self):
        x, reg = cholesky_solve(np.zeros((2, 2)), [1.0, 2.0])
        assert reg
        np.testing.assert_allclose(x, np.array([1.0, 2.0]) / 1e-12)

    def test_not_symmetric_raises(self):
        with pytest.raises(ValueError):
            cholesky_solve(np.array([[1.0, 2.0], [0.0, 1.0]]), [1.0, 1.0])

    def test_sparse_input(self):
        x, _ = cholesky_solve(sp.csc_array(np.eye(4) * 3.0), np.arange(4.0))
        np.testing.assert_allclose(x, np.arange(4.0) / 3.0)
