"""Tests for the matrix-normal/inverse-Wishart benchmark model."""

import numpy as np
import pytest
from scipy.stats import multivariate_t

from sgdlm.dlm import (EvolutionSpec, NormalGammaBelief, POSTERIOR,
                       StatePartition, evolve, update)
from sgdlm.wdlm import (MatrixNIWBelief, forecast_covariance, initial_belief,
                        precision_estimate, wdlm_evolve, wdlm_forecast,
                        wdlm_update)


def random_posterior(rng, p, m, dof=None):
    mode = rng.normal(size=(p, m))
    root = rng.normal(size=(p, p))
    scale = root @ root.T + 0.5 * np.eye(p)
    root_m = rng.normal(size=(m, m))
    ss = root_m @ root_m.T + 0.5 * np.eye(m)
    return MatrixNIWBelief(mode, scale, dof if dof else m + 5.0, ss,
                           role=POSTERIOR)


def batch_matrix_niw_regression(a0, r0, n0, b0, design, observations):
    """Independent batch oracle: conjugate matrix-normal/IW regression."""
    x = np.atleast_2d(design)
    y = np.atleast_2d(observations)
    t = y.shape[0]
    prec0 = np.linalg.inv(r0)
    prec_n = prec0 + x.T @ x
    r_n = np.linalg.inv(prec_n)
    m_n = r_n @ (prec0 @ a0 + x.T @ y)
    d_n = b0 + y.T @ y + a0.T @ prec0 @ a0 - m_n.T @ prec_n @ m_n
    return m_n, r_n, n0 + t, d_n


class TestEvolve:
    def test_no_discount_identity(self):
        post = random_posterior(np.random.default_rng(0), 2, 3)
        prior = wdlm_evolve(post, delta=1.0, beta=1.0)
        np.testing.assert_array_equal(prior.state_mode, post.state_mode)
        np.testing.assert_array_equal(prior.state_scale, post.state_scale)
        assert prior.dof == post.dof
        np.testing.assert_allclose(prior.sum_squares, post.sum_squares,
                                   rtol=1e-15)

    def test_discount_arithmetic(self):
        post = random_posterior(np.random.default_rng(1), 1, 3, dof=10.0)
        prior = wdlm_evolve(post, delta=0.9, beta=0.8)
        assert prior.dof == pytest.approx(8.0)
        np.testing.assert_allclose(prior.sum_squares,
                                   post.sum_squares * 10.0 / 12.0, rtol=1e-14)
        np.testing.assert_allclose(prior.state_scale,
                                   post.state_scale / 0.9, rtol=1e-14)

    def test_repeated_evolution_keeps_pd(self):
        belief = random_posterior(np.random.default_rng(2), 2, 4)
        for _ in range(100):
            prior = wdlm_evolve(belief, delta=0.95, beta=0.9)
            belief = MatrixNIWBelief(prior.state_mode, prior.state_scale,
                                     prior.dof, prior.sum_squares,
                                     role=POSTERIOR)
            assert np.linalg.eigvalsh(belief.sum_squares).min() > 0


class TestForecast:
    def test_zero_mode(self):
        prior = MatrixNIWBelief(np.zeros((1, 3)), np.eye(1), 6.0, np.eye(3),
                                role="prior")
        mode, scale, dof = wdlm_forecast(prior, [1.0])
        np.testing.assert_array_equal(mode, np.zeros(3))

    def test_variance_factor_arithmetic(self):
        prior = MatrixNIWBelief(np.zeros((1, 2)), np.eye(1), 6.0, np.eye(2),
                                role="prior")
        _, scale, dof = wdlm_forecast(prior, [1.0])
        np.testing.assert_allclose(scale, 2.0 * np.eye(2) / 6.0)

    def test_forecast_mode_linear_in_state(self):
        rng = np.random.default_rng(3)
        post = random_posterior(rng, 2, 3)
        prior = wdlm_evolve(post, 0.95, 0.9)
        doubled = MatrixNIWBelief(2 * prior.state_mode, prior.state_scale,
                                  prior.dof, prior.sum_squares, role="prior")
        f = np.array([1.0, 0.5])
        m1, _, _ = wdlm_forecast(prior, f)
        m2, _, _ = wdlm_forecast(doubled, f)
        np.testing.assert_allclose(m2, 2 * m1, rtol=1e-14)

    def test_density_integrates_to_one_on_grid(self):
        prior = MatrixNIWBelief(np.zeros((1, 2)), 0.5 * np.eye(1), 8.0,
                                0.25 * np.eye(2), role="prior")
        mode, scale, dof = wdlm_forecast(prior, [1.0])
        grid = np.linspace(-6, 6, 401)
        xx, yy = np.meshgrid(grid, grid)
        points = np.column_stack([xx.ravel(), yy.ravel()])
        pdf = multivariate_t.pdf(points, loc=mode, shape=scale, df=dof)
        step = grid[1] - grid[0]
        assert pdf.sum() * step * step == pytest.approx(1.0, abs=1e-3)

    def test_low_dof_covariance_flagged(self):
        from sgdlm.errors import NumericalError
        with pytest.raises(NumericalError):
            forecast_covariance(np.eye(2), dof=2.0)


class TestUpdate:
    def test_zero_error_keeps_mode_and_sum_squares(self):
        rng = np.random.default_rng(4)
        post = random_posterior(rng, 2, 3)
        prior = wdlm_evolve(post, 1.0, 1.0)
        f = np.array([1.0, -0.2])
        mode, _, _ = wdlm_forecast(prior, f)
        updated = wdlm_update(prior, f, mode)
        np.testing.assert_allclose(updated.state_mode, prior.state_mode,
                                   atol=1e-14)
        np.testing.assert_allclose(updated.sum_squares, prior.sum_squares,
                                   rtol=1e-14)
        assert updated.dof == prior.dof + 1

    def test_sequential_matches_batch_regression(self):
        rng = np.random.default_rng(5)
        p, m, t = 1, 3, 20
        a0 = rng.normal(size=(p, m))
        r0 = np.eye(p) * 2.0
        n0 = m + 3.0
        b0 = np.eye(m) * 0.5
        design = rng.normal(size=(t, p))
        y = rng.normal(size=(t, m))

        belief = MatrixNIWBelief(a0, r0, n0, b0, role=POSTERIOR)
        for i in range(t):
            prior = wdlm_evolve(belief, delta=1.0, beta=1.0)
            belief = wdlm_update(prior, design[i], y[i])

        m_b, r_b, n_b, d_b = batch_matrix_niw_regression(a0, r0, n0, b0,
                                                         design, y)
        np.testing.assert_allclose(belief.state_mode, m_b, rtol=1e-8)
        np.testing.assert_allclose(belief.state_scale, r_b, rtol=1e-8)
        assert belief.dof == pytest.approx(n_b)
        np.testing.assert_allclose(belief.sum_squares, d_b, rtol=1e-8)

    def test_sum_squares_stays_pd(self):
        rng = np.random.default_rng(6)
        belief = initial_belief(4)
        for _ in range(50):
            prior = wdlm_evolve(belief, 0.97, 0.9)
            belief = wdlm_update(prior, [1.0], rng.normal(0, 0.01, size=4))
            assert np.linalg.eigvalsh(belief.sum_squares).min() > 0


class TestPrecisionEstimate:
    def test_identity(self):
        belief = MatrixNIWBelief(np.zeros((1, 3)), np.eye(1), 6.0, np.eye(3))
        np.testing.assert_allclose(precision_estimate(belief), np.eye(3))

    def test_scale_equivariance_preserves_rankings(self):
        rng = np.random.default_rng(7)
        belief = random_posterior(rng, 1, 4)
        omega = precision_estimate(belief)
        scaled = MatrixNIWBelief(belief.state_mode, belief.state_scale,
                                 belief.dof, 3.0 * belief.sum_squares)
        omega_scaled = precision_estimate(scaled)
        np.testing.assert_allclose(omega_scaled, omega / 3.0, rtol=1e-10)
        for j in range(4):
            np.testing.assert_array_equal(np.argsort(-np.abs(omega[j])),
                                          np.argsort(-np.abs(omega_scaled[j])))

    def test_inverse_oracle(self):
        rng = np.random.default_rng(8)
        belief = random_posterior(rng, 1, 3)
        omega = precision_estimate(belief)
        np.testing.assert_allclose(omega @ belief.sum_squares, np.eye(3),
                                   atol=1e-10)


class TestScalarConsistencyWithUnivariateDlm:
    def test_m1_reduces_to_scalar_dlm_update(self):
        # Correspondence: R_ng = s * R_w, B = n * s; both recursions then
        # agree exactly, including block discounting and dof discounting.
        rng = np.random.default_rng(9)
        delta, beta = 0.97, 0.93
        a0, r_w0 = 0.3, 2.0
        n0, s0 = 6.0, 0.5

        w_belief = MatrixNIWBelief(np.array([[a0]]), np.array([[r_w0]]), n0,
                                   np.array([[n0 * s0]]), role=POSTERIOR)
        ng_belief = NormalGammaBelief([a0], [[s0 * r_w0]], n0, s0,
                                      role=POSTERIOR)
        part = StatePartition(1)
        for _ in range(25):
            y = float(rng.normal(0, 0.8))
            w_prior = wdlm_evolve(w_belief, delta, beta)
            w_belief = wdlm_update(w_prior, [1.0], [y])
            ng_prior = evolve(ng_belief, EvolutionSpec(delta, delta, beta), part)
            ng_belief, _ = update(ng_prior, [1.0], y)

            assert w_belief.state_mode[0, 0] == pytest.approx(
                ng_belief.mean[0], rel=1e-10, abs=1e-12)
            assert w_belief.dof == pytest.approx(ng_belief.dof, rel=1e-12)
            r_implied = ng_belief.scale[0, 0] / ng_belief.precision_scale
            assert w_belief.state_scale[0, 0] == pytest.approx(
                r_implied, rel=1e-10)
            b_implied = ng_belief.dof * ng_belief.precision_scale
            assert w_belief.sum_squares[0, 0] == pytest.approx(
                b_implied, rel=1e-10)
