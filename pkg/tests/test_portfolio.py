"""Tests for the equality-constrained portfolio rules and trade accounting."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize

from sgdlm.errors import ConstraintError, RuinError
from sgdlm.portfolio import (PortfolioProblem, benchmark_neutral, churn_adjust,
                             drift_weights, min_variance, realized_step,
                             solve_equality_qp, target_return)


def random_problem(rng, m, mean_scale=0.01):
    root = rng.normal(size=(m, m))
    cov = root @ root.T + 0.2 * np.eye(m)
    mean = rng.normal(scale=mean_scale, size=m)
    return mean, cov


def slsqp_oracle(cov, constraints, x0):
    """Generic numerical constrained optimizer used as the reference."""
    cons = [{"type": "eq", "fun": (lambda w, v=v, b=b: v @ w - b)}
            for v, b in constraints]
    res = minimize(lambda w: w @ cov @ w, x0, jac=lambda w: 2 * cov @ w,
                   method="SLSQP", constraints=cons,
                   options={"maxiter": 500, "ftol": 1e-14})
    assert res.success, res.message
    return res.x


class TestMinVariance:
    def test_isotropic_gives_equal_weights(self):
        w = min_variance(np.zeros(4), 2.5 * np.eye(4))
        np.testing.assert_allclose(w, 0.25, atol=1e-12)

    def test_two_asset_inverse_variance(self):
        w = min_variance(np.zeros(2), np.diag([1.0, 4.0]))
        np.testing.assert_allclose(w, [0.8, 0.2], atol=1e-10)

    def test_two_asset_grid_search_oracle(self):
        cov = np.diag([1.0, 4.0])
        grid = np.linspace(-1, 2, 30001)
        variances = [np.array([a, 1 - a]) @ cov @ np.array([a, 1 - a])
                     for a in grid]
        best = grid[int(np.argmin(variances))]
        w = min_variance(np.zeros(2), cov)
        assert w[0] == pytest.approx(best, abs=1e-4)

    def test_invariant_to_covariance_scaling(self):
        rng = np.random.default_rng(1)
        mean, cov = random_problem(rng, 4)
        np.testing.assert_allclose(min_variance(mean, cov),
                                   min_variance(mean, 7.3 * cov), atol=1e-10)

    def test_matches_numerical_oracle(self):
        rng = np.random.default_rng(2)
        mean, cov = random_problem(rng, 3)
        w = min_variance(mean, cov)
        oracle = slsqp_oracle(cov, [(np.ones(3), 1.0)], np.full(3, 1 / 3))
        np.testing.assert_allclose(w, oracle, atol=1e-8)


class TestTargetReturn:
    def test_inactive_constraint_matches_min_variance(self):
        rng = np.random.default_rng(3)
        mean, cov = random_problem(rng, 4)
        base = min_variance(mean, cov)
        w = target_return(mean, cov, tau=float(mean @ base))
        np.testing.assert_allclose(w, base, atol=1e-9)

    def test_daily_target_magnitude(self):
        assert 0.10 / 252 == pytest.approx(3.968e-4, rel=1e-3)

    def test_constraint_satisfaction(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            mean, cov = random_problem(rng, 3)
            tau = 0.10 / 252
            w = target_return(mean, cov, tau)
            assert w @ mean == pytest.approx(tau, abs=1e-10)
            assert w.sum() == pytest.approx(1.0, abs=1e-10)

    def test_parallel_mean_infeasible(self):
        cov = np.eye(3)
        mean = np.full(3, 0.002)
        with pytest.raises(ConstraintError):
            target_return(mean, cov, tau=0.01)

    def test_parallel_mean_consistent_target_is_redundant(self):
        # When the forced return equals the target exactly, the constraint
        # carries no information and the rule reduces to minimum variance.
        cov = np.diag([1.0, 2.0, 3.0])
        mean = np.full(3, 0.002)
        w = target_return(mean, cov, tau=0.002)
        np.testing.assert_allclose(w, min_variance(mean, cov), atol=1e-12)


class TestBenchmarkNeutral:
    def test_constraints_always_hold(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            mean, cov = random_problem(rng, 5)
            w = benchmark_neutral(mean, cov, tau=0.001)
            assert abs(w[0]) < 1e-10
            assert abs(w @ cov[:, 0]) < 1e-8 * np.abs(cov).max()
            assert w.sum() == pytest.approx(1.0, abs=1e-10)
            assert w @ mean == pytest.approx(0.001, abs=1e-10)

    def test_decoupled_benchmark_reduces_to_subproblem(self):
        rng = np.random.default_rng(6)
        mean, cov = random_problem(rng, 5)
        cov[0, 1:] = 0.0
        cov[1:, 0] = 0.0
        w = benchmark_neutral(mean, cov)
        sub = min_variance(mean[1:], cov[1:, 1:])
        assert w[0] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(w[1:], sub, atol=1e-10)

    def test_matches_numerical_oracle(self):
        rng = np.random.default_rng(7)
        mean, cov = random_problem(rng, 4)
        w = benchmark_neutral(mean, cov)
        e0 = np.zeros(4)
        e0[0] = 1.0
        oracle = slsqp_oracle(cov, [(np.ones(4), 1.0), (e0, 0.0),
                                    (cov[:, 0], 0.0)], np.full(4, 0.25))
        np.testing.assert_allclose(w, oracle, atol=1e-8)


class TestNestedConstraints:
    def test_variance_monotone_in_constraints(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            mean, cov = random_problem(rng, 5)
            tau = float(mean @ np.full(5, 0.2)) + 1e-3
            w1 = min_variance(mean, cov)
            w2 = target_return(mean, cov, tau)
            w3 = benchmark_neutral(mean, cov, tau)
            v1 = w1 @ cov @ w1
            v2 = w2 @ cov @ w2
            v3 = w3 @ cov @ w3
            assert v1 <= v2 + 1e-12
            assert v2 <= v3 + 1e-12


class TestChurn:
    def test_no_move_no_cost(self):
        w = np.array([0.5, 0.5])
        decision = churn_adjust(w, w, np.array([0.01, 0.0]), cost_rate=0.001)
        assert decision.turnover == 0.0
        assert decision.cost == 0.0
        np.testing.assert_array_equal(decision.executed_weights, w)

    def test_gain_twice_cost_executes(self):
        current = np.array([1.0, 0.0])
        target = np.array([0.0, 1.0])
        mean = np.array([0.0, 0.004])  # gain 0.004, cost 0.002
        decision = churn_adjust(current, target, mean, cost_rate=0.001)
        np.testing.assert_array_equal(decision.executed_weights, target)
        assert decision.cost == pytest.approx(0.002)

    def test_insufficient_gain_stays_put(self):
        current = np.array([1.0, 0.0])
        target = np.array([0.0, 1.0])
        mean = np.array([0.0, 0.001])  # gain 0.001 < cost 0.002
        decision = churn_adjust(current, target, mean, cost_rate=0.001)
        np.testing.assert_array_equal(decision.executed_weights, current)
        assert decision.cost == 0.0

    def test_free_trading_always_updates(self):
        rng = np.random.default_rng(9)
        current = rng.dirichlet(np.ones(4))
        target = rng.dirichlet(np.ones(4))
        decision = churn_adjust(current, target, rng.normal(size=4) * 0.01,
                                cost_rate=0.0)
        np.testing.assert_array_equal(decision.executed_weights, target)

    def test_executed_never_worse_than_holding(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            current = rng.normal(size=3)
            current /= current.sum()
            target = rng.normal(size=3)
            target /= target.sum()
            mean = rng.normal(scale=0.01, size=3)
            decision = churn_adjust(current, target, mean, cost_rate=0.001)
            gain = mean @ (decision.executed_weights - current)
            assert gain - decision.cost >= -1e-15


class TestRealizedStep:
    def test_zero_returns_zero(self):
        assert realized_step(np.array([0.3, 0.7]), np.zeros(2), 0.0) == 0.0

    def test_single_asset_pass_through(self):
        w = np.array([1.0, 0.0])
        y = np.array([0.01, -0.5])
        assert realized_step(w, y, 0.0) == pytest.approx(0.01)

    def test_equal_weight_convexity(self):
        w = np.array([0.5, 0.5])
        y = np.array([0.01, -0.01])
        value = realized_step(w, y, 0.0)
        assert value == pytest.approx(math.log((math.exp(0.01)
                                                + math.exp(-0.01)) / 2))
        assert value == pytest.approx(5.0e-5, abs=2e-6)

    def test_cost_subtracts(self):
        w = np.array([1.0])
        assert realized_step(w, np.array([0.01]), 0.002) == pytest.approx(0.008)

    def test_catastrophic_short_loss_raises(self):
        w = np.array([2.0, -1.0])
        y = np.array([-2.0, 1.5])
        with pytest.raises(RuinError):
            realized_step(w, y, 0.0)

    def test_drift_weights_renormalize(self):
        w = np.array([0.6, 0.4])
        y = np.array([0.05, -0.05])
        drifted = drift_weights(w, y)
        assert drifted.sum() == pytest.approx(1.0)
        assert drifted[0] > 0.6  # winner gains weight


class TestDegenerateConstraints:
    def test_inconsistent_constraint_named(self):
        problem = PortfolioProblem(np.zeros(3), np.eye(3),
                                   [(np.ones(3), 1.0), (np.ones(3), 2.0)])
        with pytest.raises(ConstraintError) as err:
            solve_equality_qp(problem)
        assert err.value.constraint_index == 1
