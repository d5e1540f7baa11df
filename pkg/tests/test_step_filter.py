"""Filter acceptance, domination pruning, reductions, and radius updates."""
import numpy as np
import pytest

from nlhlsp.hlsp_ipm import HlspLevel
from nlhlsp.step_filter import (
    Filter,
    TrustRegionStall,
    filter_acceptable,
    filter_add,
    nstra_update,
    reductions,
    step_filter_iterate,
)


def fresh(cap=1e4):
    return Filter(level=1, cap=cap)


class TestFilterAcceptance:
    def test_initial_cap_entry(self):
        f = fresh(cap=1e4)
        assert filter_acceptable(f, 3.0, 5.0)
        assert not filter_acceptable(f, 2e4, 0.0)

    def test_h_branch(self):
        f = fresh()
        filter_add(f, 1.0, 2.0)
        assert filter_acceptable(f, 0.5, 5.0)

    def test_g_branch_boundary(self):
        f = fresh()
        filter_add(f, 1.0, 2.0)
        # 1.9999 + 1e-4 <= 2.0 holds with equality
        assert filter_acceptable(f, 1.0, 1.9999)
        assert not filter_acceptable(f, 1.0, 1.99995)

    def test_margins_validated(self):
        with pytest.raises(ValueError):
            Filter(level=1, beta=1e-4, gamma=0.99)


class TestFilterAdd:
    def test_dominated_entry_removed(self):
        f = fresh()
        filter_add(f, 1.0, 2.0)
        filter_add(f, 0.5, 1.0)
        assert (1.0, 2.0) not in f.entries
        assert (0.5, 1.0) in f.entries

    def test_incomparable_entries_kept(self):
        f = fresh()
        filter_add(f, 1.0, 2.0)
        filter_add(f, 2.0, 3.0)
        assert (1.0, 2.0) in f.entries and (2.0, 3.0) in f.entries

    def test_duplicate_single_copy(self):
        f = fresh()
        filter_add(f, 1.0, 2.0)
        filter_add(f, 1.0, 2.0)
        assert f.entries.count((1.0, 2.0)) == 1

    def test_cap_entry_never_dominated(self):
        f = fresh(cap=10.0)
        filter_add(f, 0.1, 0.1)
        assert (10.0, -np.inf) in f.entries

    def test_no_mutual_domination_invariant(self):
        rng = np.random.default_rng(0)
        f = fresh()
        for h, g in rng.random((50, 2)):
            if filter_acceptable(f, h, g):
                filter_add(f, h, g)
            for i, (hi, gi) in enumerate(f.entries):
                for j, (hj, gj) in enumerate(f.entries):
                    if i != j:
                        assert not (hi <= hj and gi <= gj)


class TestReductions:
    def test_linear_equality_model_exact(self):
        # task f(x) = x - b linearized at x: dq equals df exactly
        x = np.array([1.0, -2.0])
        b = np.array([3.0, 0.5])
        level = HlspLevel.build(2, a_eq=np.eye(2), b_eq=-(x - b))
        dx = np.array([0.7, -0.3])
        f_now = np.linalg.norm(x - b)
        f_cand = np.linalg.norm(x + dx - b)
        dq, df = reductions(level, dx, f_now, f_cand)
        assert dq == pytest.approx(df, rel=1e-12)

    def test_zero_step(self):
        level = HlspLevel.build(2, a_eq=np.eye(2), b_eq=[1.0, 2.0])
        dq, df = reductions(level, np.zeros(2), 5.0, 5.0)
        assert dq == 0.0 and df == 0.0

    def test_rosenbrock_direction(self):
        # f(x) = (1-x1)^2 + 100 (x2 - x1^2)^2 at x = 0, step (0.1, 0)
        x = np.zeros(2)
        fval = 1.0
        jac = np.array([[-2.0, 0.0]])
        level = HlspLevel.build(2, a_eq=jac, b_eq=[-fval])
        dx = np.array([0.1, 0.0])
        f_cand = (1 - 0.1) ** 2 + 100.0 * (0.0 - 0.1**2) ** 2
        dq, df = reductions(level, dx, fval, f_cand)
        # model: |f + J dx|^2 = (1 - 0.2)^2 = 0.64 -> dq = 0.36
        assert dq == pytest.approx(1.0 - 0.64, rel=1e-12)
        assert df == pytest.approx(1.0 - f_cand**2, rel=1e-12)
        # finite-difference sanity: dq matches df to first order in the step
        assert df == pytest.approx(dq, abs=0.05)


class TestStepFilterIterate:
    def test_nominal_acceptance_doubles_radius(self):
        f = fresh()
        acc, rho = step_filter_iterate(f, 0.0, 1.0, dq=1.0, df=0.9, rho=2.0, rho_max=10.0)
        assert acc and rho == 4.0

    def test_radius_capped(self):
        f = fresh()
        acc, rho = step_filter_iterate(f, 0.0, 1.0, dq=1.0, df=0.9, rho=8.0, rho_max=10.0)
        assert acc and rho == 10.0

    def test_insufficient_reduction_rejects(self):
        f = fresh()
        acc, rho = step_filter_iterate(f, 0.0, 1.0, dq=1.0, df=0.05, rho=2.0, rho_max=10.0)
        assert not acc and rho == 1.0

    def test_h_type_enters_filter(self):
        f = fresh()
        acc, _ = step_filter_iterate(f, 0.3, 1.0, dq=-1.0, df=-0.5, rho=2.0, rho_max=10.0)
        assert acc
        assert (0.3, 1.0) in f.entries

    def test_filter_rejection_halves(self):
        f = fresh()
        filter_add(f, 0.5, 1.0)
        acc, rho = step_filter_iterate(f, 0.5, 1.0, dq=-1.0, df=0.0, rho=2.0, rho_max=10.0)
        assert not acc and rho == 1.0

    def test_stall_reported(self):
        f = fresh()
        filter_add(f, 0.5, 1.0)
        with pytest.raises(TrustRegionStall):
            step_filter_iterate(f, 0.5, 1.0, dq=-1.0, df=0.0, rho=1e-14, rho_max=10.0)


class TestNstraUpdate:
    def test_rejection_formula(self):
        rho, streak = nstra_update(10.0, 0.05, kappa=100.0, chi=1e-5,
                                   accepted=False, inertia_count=5)
        assert rho == pytest.approx(0.1)
        assert streak == 0

    def test_acceptance_below_inertia_unchanged(self):
        rho, streak = nstra_update(10.0, 0.05, 100.0, 1e-5, True, inertia_count=0)
        assert rho == 0.05 and streak == 1

    def test_acceptance_streak_capped_at_upper_radius(self):
        rho, streak = nstra_update(10.0, 8.0, 100.0, 1e-5, True, inertia_count=1)
        assert rho == 10.0 and streak == 2

    def test_chi_squared_floor(self):
        rho, _ = nstra_update(1e-9, 1e-12, 100.0, 1e-5, False, 0)
        assert rho == pytest.approx(1e-10)  # chi^2 floor
