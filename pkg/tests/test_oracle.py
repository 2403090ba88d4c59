import numpy as np
import pytest
from hypothesis import given, strategies as st

from contextwin.envs import FiniteArm, build_belief_mdp, random_partial_arm, standard_arm
from contextwin.oracle import (ActiveSetTable, ConvergenceError, active_set_table,
                               check_indexability, check_strong_indexability, indexability_from_membership,
                               solve_lambdas, threshold_curve, value_iteration, whittle_bisect, whittle_table)
from oracles import batched_policy_iteration, grid_whittle

BETA = 0.95


def random_arm(rng, n):
    p_act = rng.dirichlet(np.ones(n), size=n)
    p_pass = rng.dirichlet(np.ones(n), size=n)
    return FiniteArm(p_act, p_pass, rng.uniform(-1, 1, n), rng.uniform(-1, 1, n))


def symmetric_arm():
    P = np.array([[0.6, 0.4, 0.0], [0.1, 0.5, 0.4], [0.3, 0.3, 0.4]])
    r = np.array([0.0, 0.5, 1.0])
    return FiniteArm(P, P, r, r)


def bonus_arm(c=0.3):
    P = np.array([[0.6, 0.4, 0.0], [0.1, 0.5, 0.4], [0.3, 0.3, 0.4]])
    r = np.array([0.0, 0.5, 1.0])
    return FiniteArm(P, P, r + c, r)


seeds = st.integers(0, 2**31 - 1)


class TestValueIteration:
    def test_limits(self):
        arm = standard_arm()
        assert not value_iteration(arm, 1e6, BETA).active_set.any()
        assert value_iteration(arm, -1e6, BETA).active_set.all()

    def test_symmetric_ties_activate(self):
        res = value_iteration(symmetric_arm(), 0.0, BETA)
        np.testing.assert_allclose(res.q_act, res.q_pass, atol=1e-9)
        assert res.active_set.all()

    def test_matches_policy_iteration(self):
        arm = random_arm(np.random.default_rng(0), 6)
        lams = np.linspace(-1, 1, 21)
        res = solve_lambdas(arm, lams, 0.9)
        ref, adv = batched_policy_iteration(arm.p_act, arm.p_pass, arm.r_act, arm.r_pass, lams, 0.9)
        np.testing.assert_array_equal(res.active_set, ref)
        np.testing.assert_allclose(res.advantage, adv, atol=1e-9)

    def test_residuals_contract(self):
        res = value_iteration(standard_arm(), 0.1, 0.9, exact=False)
        r = np.array(res.residuals)
        r = r[r > 1e-13]
        assert np.all(r[1:] <= 0.9 * r[:-1] + 1e-12)

    def test_value_error_within_tolerance(self):
        arm = random_arm(np.random.default_rng(1), 5)
        exact = solve_lambdas(arm, [0.2], 0.9, exact=True).values[0]
        approx = solve_lambdas(arm, [0.2], 0.9, tol=1e-6, exact=False).values[0]
        assert np.max(np.abs(exact - approx)) <= 1e-6

    def test_iteration_cap_reports_residual(self):
        with pytest.raises(ConvergenceError) as err:
            value_iteration(standard_arm(), 0.0, 0.999, max_iter=5)
        assert err.value.residual > 0

    @given(seed=seeds, c=st.floats(-2, 2))
    def test_common_reward_shift(self, seed, c):
        arm = random_arm(np.random.default_rng(seed), 4)
        shifted = FiniteArm(arm.p_act, arm.p_pass, arm.r_act + c, arm.r_pass + c)
        a = value_iteration(arm, 0.1, 0.9)
        b = value_iteration(shifted, 0.1, 0.9)
        np.testing.assert_array_equal(a.active_set, b.active_set)
        np.testing.assert_allclose(b.values, a.values + c / (1 - 0.9), atol=1e-8)


class TestWhittle:
    def test_symmetric_arm_zero(self):
        np.testing.assert_allclose(whittle_table(symmetric_arm(), BETA).w, 0.0, atol=1e-6)

    def test_constant_bonus(self):
        np.testing.assert_allclose(whittle_table(bonus_arm(0.3), BETA).w, 0.3, atol=1e-5)

    def test_single_state_query(self):
        arm = standard_arm()
        assert whittle_bisect(arm, 5, BETA) == pytest.approx(whittle_table(arm, BETA).w[5], abs=2e-6)
        with pytest.raises(IndexError):
            whittle_bisect(arm, 99, BETA)

    def test_matches_exhaustive_grid(self):
        arm = standard_arm()
        w = whittle_table(arm, BETA).w
        g, _ = grid_whittle(arm, BETA, -4.0, 0.5, 1e-4)
        np.testing.assert_allclose(w, g, atol=2e-4)

    @given(seed=seeds, c=st.floats(-1, 1))
    def test_active_bonus_shifts_index(self, seed, c):
        arm = build_belief_mdp(random_partial_arm(np.random.default_rng(seed)), 4)
        shifted = FiniteArm(arm.p_act, arm.p_pass, arm.r_act + c, arm.r_pass)
        np.testing.assert_allclose(whittle_table(shifted, 0.9).w, whittle_table(arm, 0.9).w + c, atol=2e-6)

    def test_consistent_with_membership(self):
        arm = build_belief_mdp(random_partial_arm(np.random.default_rng(3)), 8)
        tol = 1e-6
        w = whittle_table(arm, 0.9, tol).w
        below = solve_lambdas(arm, w - 2 * tol, 0.9).active_set
        above = solve_lambdas(arm, w + 2 * tol, 0.9).active_set
        assert np.all(np.diag(below)) and not np.any(np.diag(above))

    def test_monotone_in_belief_within_chain(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            T = 12
            arm = build_belief_mdp(random_partial_arm(rng), T)
            w = whittle_table(arm, BETA).w
            for chain in (slice(0, T + 1), slice(T + 1, 2 * T + 2)):
                order = np.argsort(arm.beliefs[chain], kind="stable")
                assert np.all(np.diff(w[chain][order]) >= -2e-6)


class TestCertificates:
    def test_two_point_grid_trivially_monotone(self):
        assert check_indexability(random_arm(np.random.default_rng(4), 5), [-1e6, 1e6], 0.9).indexable

    def test_injected_reentry(self):
        m = np.array([[True, True], [False, True], [True, False], [False, False]])
        rep = indexability_from_membership(ActiveSetTable(np.array([0.0, 1.0, 2.0, 3.0]), m))
        assert not rep.indexable
        assert rep.violations == [(0, 1.0, 2.0)]

    def test_grid_must_increase(self):
        with pytest.raises(ValueError):
            ActiveSetTable(np.array([0.0, 0.0]), np.ones((2, 1), dtype=bool))

    def test_report_is_grid_qualified(self):
        rep = check_indexability(standard_arm(), np.linspace(-2, 2, 101), BETA)
        assert rep.indexable and rep.limits_ok
        assert rep.grid_points == 101 and rep.grid_resolution == pytest.approx(0.04)

    def test_single_state_vacuously_strong(self):
        arm = FiniteArm(np.eye(1), np.eye(1), [0.5], [0.0])
        assert check_strong_indexability(arm, np.linspace(-2, 2, 11), 0.9).strong

    def test_symmetric_arm_strong(self):
        rep = check_strong_indexability(symmetric_arm(), np.linspace(-2, 2, 21), 0.9)
        assert rep.indexable and rep.strong and not rep.strong_violations

    def test_advantage_violation_is_reported(self):
        rep = check_strong_indexability(standard_arm(10), np.linspace(-2, 2, 101), BETA)
        assert rep.strong is False and rep.strong_violations
        (s, s2), lam = rep.strong_violations[0]
        assert -2 <= lam <= 2 and s != s2


class TestThreshold:
    def test_limits(self):
        arm = standard_arm()
        curve = threshold_curve(arm, [-1e3, 1e3], BETA)
        assert curve.threshold_index.tolist() == [0, arm.num_states]

    def test_requires_beliefs(self):
        with pytest.raises(ValueError):
            threshold_curve(symmetric_arm(), [0.0, 1.0], BETA)

    def test_standard_arm_thresholds_non_decreasing(self):
        curve = threshold_curve(standard_arm(), np.linspace(-2, 2, 101), BETA)
        assert np.all(np.diff(curve.threshold_index) >= 0)
        assert curve.decreasing_at == []
        # the truncated chain end outranks (1, 0) near lambda = 0.28, so one grid
        # point is not a pure belief threshold; see the decisions ledger
        assert curve.non_threshold == [pytest.approx(0.28)]

    def test_membership_table_shape(self):
        table, adv = active_set_table(standard_arm(), np.linspace(-1, 1, 5), BETA)
        assert table.membership.shape == (5, 22) and adv.shape == (5, 22)
