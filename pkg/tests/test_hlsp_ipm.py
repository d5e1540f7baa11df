"""Interior-point sub-problem solver: steps, line search, hierarchy logic."""
import numpy as np
import pytest
import scipy.sparse as sp

from nlhlsp.hlsp_ipm import (
    BarrierDomainError,
    HlspLevel,
    IpmSettings,
    dual_line_search,
    ipm_newton_step,
    solve_hlsp,
)
from nlhlsp.matrix_kernels import SparseMatrix


def level(n, a_eq=None, b_eq=None, a_ineq=None, b_ineq=None, index=1):
    return HlspLevel.build(n, a_eq, b_eq, a_ineq, b_ineq, index=index)


def enumeration_oracle(a, b):
    """Brute-force optimum of min 0.5 || max(0, A x - b) ||^2.

    Every subset of rows is treated as the violated set; stationarity of
    that subset's least-squares problem covers the true optimum, and
    evaluating the real objective keeps wrong subsets from underbidding.
    """
    m, n = a.shape

    def objective(x):
        return 0.5 * float(np.sum(np.maximum(0.0, a @ x - b) ** 2))

    best = objective(np.zeros(n))
    for mask in range(1 << m):
        rows = [i for i in range(m) if mask & (1 << i)]
        if not rows:
            continue
        sub_a, sub_b = a[rows], b[rows]
        x = np.linalg.lstsq(sub_a, sub_b, rcond=None)[0]
        best = min(best, objective(x))
    return best


class TestNewtonStep:
    def test_identity(self):
        dz, dx = ipm_newton_step(np.eye(2), np.array([1.0, 0.0]))
        np.testing.assert_allclose(dz, [1.0, 0.0])
        np.testing.assert_allclose(dx, [1.0, 0.0])

    def test_zero_column_basis(self):
        basis = sp.csc_array((3, 0))
        dz, dx = ipm_newton_step(np.eye(3), np.ones(3), basis)
        assert dz.size == 0
        np.testing.assert_allclose(dx, np.zeros(3))

    def test_random_spd_vs_dense_oracle(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(6, 6))
        c = m @ m.T + 6 * np.eye(6)
        r = rng.normal(size=6)
        nmat = sp.csc_array(rng.normal(size=(6, 4)))
        dz, dx = ipm_newton_step(sp.csc_array(c), r, nmat)
        nd = nmat.toarray()
        oracle = np.linalg.solve(nd.T @ c @ nd, nd.T @ r)
        assert np.linalg.norm(dz - oracle) <= 1e-10 * max(1, np.linalg.norm(oracle))
        np.testing.assert_allclose(dx, nd @ oracle, atol=1e-9)


class TestDualLineSearch:
    def test_full_step(self):
        z = np.zeros(0)
        alpha = dual_line_search(
            -np.ones(2), -np.ones(2), np.ones(2), np.ones(2), z, z, z, z
        )
        assert alpha == 1.0

    def test_ratio_test(self):
        z = np.zeros(0)
        alpha = dual_line_search(
            z, z, np.array([1.0]), np.array([-2.0]), z, z, z, z
        )
        assert alpha == pytest.approx(0.995 * 0.5)

    def test_multiple_blocking_components(self):
        rng = np.random.default_rng(1)
        w = rng.uniform(0.1, 2.0, size=8)
        dw = rng.uniform(-3.0, 1.0, size=8)
        z = np.zeros(0)
        alpha = dual_line_search(z, z, w, dw, z, z, z, z)
        ratios = [w[i] / -dw[i] for i in range(8) if dw[i] < 0]
        expected = min(1.0, 0.995 * min(ratios))
        assert alpha == pytest.approx(expected)


class TestSolveHlsp:
    def test_single_equality(self):
        sol = solve_hlsp([level(1, a_eq=[[1.0]], b_eq=[1.0])], [10.0])
        np.testing.assert_allclose(sol.dx, [1.0], atol=1e-8)
        assert sol.v_star_norm(1) <= 1e-8
        lam_tr = [v for p, v in sol.levels[0].lam_pool if p[0] == "tr"]
        assert max(lam_tr) <= 1e-6  # trust region slack against the bound

    def test_two_level_lexicographic(self):
        l1 = level(2, a_eq=[[1.0, 0.0]], b_eq=[1.0], index=1)
        l2 = level(2, a_eq=[[1.0, 0.0], [0.0, 1.0]], b_eq=[0.0, 2.0], index=2)
        sol = solve_hlsp([l1, l2], [10.0, 10.0])
        np.testing.assert_allclose(sol.dx, [1.0, 2.0], atol=1e-7)
        np.testing.assert_allclose(sol.levels[1].v_eq, [1.0, 0.0], atol=1e-7)

    def test_infeasible_inequalities(self):
        # x <= 1 and -x <= -2 cannot hold: optimum splits the gap
        l1 = level(
            1, a_ineq=[[1.0], [-1.0]], b_ineq=[1.0, -2.0], index=1
        )
        sol = solve_hlsp([l1], [10.0])
        np.testing.assert_allclose(sol.dx, [1.5], atol=1e-6)
        assert sol.v_star_norm(1) == pytest.approx(np.sqrt(0.5), abs=1e-6)

    def test_minimum_norm_equality_solution(self):
        # a wide-open trust region: its barrier bias (the gap between the
        # analytic center and the minimum-norm point, O(|x|^3 / rho^2))
        # stays far below the tolerance
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 5))
        b = rng.normal(size=2)
        sol = solve_hlsp([level(5, a_eq=a, b_eq=b)], [1e3])
        oracle = np.linalg.lstsq(a, b, rcond=None)[0]  # minimum-norm solution
        assert np.linalg.norm(sol.dx - oracle) <= 1e-8 * max(1, np.linalg.norm(oracle))

    def test_trust_region_binds(self):
        sol = solve_hlsp([level(1, a_eq=[[1.0]], b_eq=[5.0])], [2.0])
        assert sol.dx[0] == pytest.approx(2.0, abs=1e-6)
        assert np.max(np.abs(sol.dx)) <= 2.0 + 1e-8
        # the saturated bound was activated with a positive multiplier
        tr_acts = [p for p in sol.active.provenance if p[0] == "tr"]
        assert ("tr", 0, 1) in tr_acts

    def test_activated_bound_removed_from_basis(self):
        sol = solve_hlsp([level(2, a_eq=[[1.0, 0.0]], b_eq=[5.0])], [2.0])
        basis = sol.active.basis.toarray()
        # dx_0 is pinned at the bound: no basis direction may move it
        assert basis.shape[1] >= 1
        assert np.max(np.abs(basis[0, :])) <= 1e-8

    def test_lexicographic_invariance(self):
        rng = np.random.default_rng(5)
        levels = [
            level(4, a_eq=rng.normal(size=(1, 4)), b_eq=rng.normal(size=1), index=1),
            level(4, a_ineq=rng.normal(size=(2, 4)), b_ineq=rng.normal(size=2) - 2.0, index=2),
            level(4, a_eq=rng.normal(size=(3, 4)), b_eq=rng.normal(size=3), index=3),
        ]
        sol = solve_hlsp(levels, [10.0, 10.0, 10.0])
        rows = sol.active.rows.toarray()
        np.testing.assert_allclose(
            rows @ sol.dx - sol.active.rhs, sol.active.targets, atol=1e-8
        )
        proj = np.abs(rows @ sol.active.basis.toarray())
        if proj.size:
            assert np.max(proj) <= 1e-8

    def test_infeasible_pool_detected(self):
        l1 = level(1, a_eq=[[1.0]], b_eq=[0.0], index=1)
        l1i = level(1, a_ineq=[[1.0]], b_ineq=[-1.0], index=1)  # x <= -1
        l2 = level(1, a_eq=[[1.0]], b_eq=[0.0], index=2)
        sol = solve_hlsp([l1i, l2], [10.0, 10.0])
        # feasible inequality stays satisfied; no error raised
        assert sol.dx[0] <= -1.0 + 1e-6

    def test_radii_validation(self):
        with pytest.raises(ValueError):
            solve_hlsp([level(1, a_eq=[[1.0]], b_eq=[1.0])], [10.0, 5.0])
        with pytest.raises(ValueError):
            solve_hlsp([level(1, a_eq=[[1.0]], b_eq=[1.0])], [-1.0])

    def test_empty_projection_skipped(self):
        l1 = level(1, a_eq=[[1.0]], b_eq=[1.0], index=1)
        l2 = level(1, a_eq=[[2.0]], b_eq=[0.0], index=2)
        sol = solve_hlsp([l1, l2], [10.0, 10.0])
        assert sol.levels[1].skipped
        assert sol.levels[1].inner_iterations == 0
        assert sol.levels[1].nnz == 0
        # level 2 keeps the value implied by level 1
        np.testing.assert_allclose(sol.levels[1].v_eq, [2.0], atol=1e-7)

    def test_dual_feasibility_along_iterates(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(6, 3))
        b = rng.normal(size=6)
        sol = solve_hlsp([level(3, a_ineq=a, b_ineq=b)], [10.0])
        assert all(w > 0.0 for w in sol.levels[0].min_w_trace)


class TestEnumerationOracle:
    @pytest.mark.parametrize("seed", range(12))
    def test_ipm_matches_bruteforce(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = rng.integers(1, 6)
        m = rng.integers(1, 9)
        a = rng.normal(size=(m, n))
        b = rng.normal(size=m)
        sol = solve_hlsp([level(n, a_ineq=a, b_ineq=b)], [1e3])
        ipm_obj = 0.5 * float(np.sum(np.maximum(0.0, a @ sol.dx - b) ** 2))
        oracle = enumeration_oracle(a, b)
        assert ipm_obj <= oracle + 1e-6
        assert ipm_obj >= oracle - 1e-6
