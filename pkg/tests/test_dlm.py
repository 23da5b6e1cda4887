"""Tests for the univariate conjugate DLM recursions."""

import numpy as np
import pytest
from scipy import stats

from sgdlm.diagnostics import Diagnostics
from sgdlm.dlm import (EvolutionSpec, NormalGammaBelief, POSTERIOR, PRIOR,
                       StatePartition, evolve, ng_logpdf, ng_sample, update)
from sgdlm.errors import NumericalError


def make_posterior(mean, scale, dof, s):
    return NormalGammaBelief(np.asarray(mean, dtype=float),
                             np.asarray(scale, dtype=float), dof, s,
                             role=POSTERIOR)


def batch_normal_gamma_regression(a0, r0, n0, s0, design, observations):
    """Independent batch oracle: conjugate normal/gamma linear regression.

    Parameterization matches the filter: theta | lam ~ N(a0, R0/(s0 lam)),
    lam ~ Gamma(n0/2, rate n0*s0/2).
    """
    x = np.atleast_2d(design)
    y = np.asarray(observations, dtype=float)
    t = y.shape[0]
    prec0 = s0 * np.linalg.inv(r0)
    prec_n = prec0 + x.T @ x
    v_n = np.linalg.inv(prec_n)
    m_n = v_n @ (prec0 @ a0 + x.T @ y)
    n_t = n0 + t
    rate = n0 * s0 / 2.0 + 0.5 * (y @ y + a0 @ prec0 @ a0 - m_n @ prec_n @ m_n)
    s_t = 2.0 * rate / n_t
    return m_n, s_t * v_n, n_t, s_t


class TestEvolve:
    def test_no_discount_identity(self):
        post = make_posterior([0.3, -0.1], [[2.0, 0.5], [0.5, 1.0]], 7.0, 0.02)
        prior = evolve(post, EvolutionSpec(1.0, 1.0, 1.0),
                       StatePartition(1, (2,)))
        assert prior.role == PRIOR
        np.testing.assert_array_equal(prior.mean, post.mean)
        np.testing.assert_array_equal(prior.scale, post.scale)
        assert prior.dof == post.dof
        assert prior.precision_scale == post.precision_scale

    def test_scalar_discount(self):
        post = make_posterior([1.0], [[2.0]], 5.0, 1.0)
        prior = evolve(post, EvolutionSpec(delta_phi=0.5), StatePartition(1))
        assert prior.scale[0, 0] == pytest.approx(4.0)

    def test_block_discount_matches_reference_matrix_computation(self):
        # Independent oracle: R = B + W with W built block by block.
        post = make_posterior([0.0, 0.0], np.eye(2), 5.0, 1.0)
        spec = EvolutionSpec(delta_phi=0.995, delta_gamma=0.999)
        prior = evolve(post, spec, StatePartition(1, (3,)))
        b = np.eye(2)
        w = np.zeros((2, 2))
        w[0, 0] = b[0, 0] * (1 / 0.995 - 1)
        w[1, 1] = b[1, 1] * (1 / 0.999 - 1)
        w[0, 1] = w[1, 0] = b[0, 1] * (1 / np.sqrt(0.995 * 0.999) - 1)
        np.testing.assert_allclose(prior.scale, b + w, rtol=1e-14)
        np.testing.assert_allclose(np.diag(prior.scale),
                                   [1 / 0.995, 1 / 0.999], rtol=1e-14)
        assert prior.scale[0, 1] == 0.0

    def test_cross_block_scaling(self):
        c = np.array([[1.0, 0.4], [0.4, 2.0]])
        post = make_posterior([0.1, 0.2], c, 5.0, 1.0)
        spec = EvolutionSpec(delta_phi=0.9, delta_gamma=0.95)
        prior = evolve(post, spec, StatePartition(1, (5,)))
        assert prior.scale[0, 1] == pytest.approx(0.4 / np.sqrt(0.9 * 0.95))

    def test_transition_diag_scales_mean(self):
        post = make_posterior([1.0, 2.0], np.eye(2), 5.0, 1.0)
        spec = EvolutionSpec(transition_diag=np.array([1.0, 0.5]))
        prior = evolve(post, spec, StatePartition(1, (2,)))
        np.testing.assert_allclose(prior.mean, [1.0, 1.0])

    def test_requires_posterior_role(self):
        post = make_posterior([0.0], [[1.0]], 5.0, 1.0)
        prior = evolve(post, EvolutionSpec(), StatePartition(1))
        with pytest.raises(ValueError):
            evolve(prior, EvolutionSpec(), StatePartition(1))


class TestUpdate:
    def test_hand_worked_scalar_case(self):
        prior = NormalGammaBelief([0.0], [[1.0]], 4.0, 1.0, role=PRIOR)
        post, stats = update(prior, [1.0], 0.0)
        assert stats.forecast_error == 0.0
        assert stats.forecast_var == pytest.approx(2.0)
        assert stats.adaptive_vector[0] == pytest.approx(0.5)
        assert stats.vol_update == pytest.approx(0.8)
        assert post.mean[0] == 0.0
        assert post.scale[0, 0] == pytest.approx(0.4)
        assert post.dof == 5.0
        assert post.precision_scale == pytest.approx(0.8)

    def test_unit_standardized_error_keeps_volatility(self):
        # e^2/q = q means z = 1 and s is unchanged: r=9, q=1, e=1.
        prior = NormalGammaBelief([0.0], [[0.5]], 9.0, 0.5, role=PRIOR)
        post, stats = update(prior, [1.0], 1.0)
        assert stats.forecast_var == pytest.approx(1.0)
        assert stats.vol_update == pytest.approx(1.0)
        assert post.precision_scale == pytest.approx(prior.precision_scale)

    def test_sequential_matches_batch_regression(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            p = int(rng.integers(1, 3))
            a0 = rng.normal(size=p)
            root = rng.normal(size=(p, p))
            r0 = root @ root.T + np.eye(p)
            n0, s0 = 5.0, 0.5
            t = 20
            design = rng.normal(size=(t, p))
            y = rng.normal(size=t)

            belief = NormalGammaBelief(a0, r0, n0, s0, role=POSTERIOR)
            part = StatePartition(p)
            for i in range(t):
                prior = evolve(belief, EvolutionSpec(1.0, 1.0, 1.0), part)
                belief, _ = update(prior, design[i], y[i])

            m_b, c_b, n_b, s_b = batch_normal_gamma_regression(
                a0, r0, n0, s0, design, y)
            np.testing.assert_allclose(belief.mean, m_b, rtol=1e-8)
            np.testing.assert_allclose(belief.scale, c_b, rtol=1e-8)
            assert belief.dof == pytest.approx(n_b)
            assert belief.precision_scale == pytest.approx(s_b, rel=1e-8)

    def test_posterior_scale_stays_psd(self):
        rng = np.random.default_rng(23)
        for trial in range(30):
            p = int(rng.integers(1, 5))
            root = rng.normal(size=(p, p))
            r0 = root @ root.T + 1e-3 * np.eye(p)
            prior = NormalGammaBelief(rng.normal(size=p), r0,
                                      float(rng.uniform(2, 20)),
                                      float(rng.uniform(0.1, 2)), role=PRIOR)
            post, _ = update(prior, rng.normal(size=p), float(rng.normal()))
            w = np.linalg.eigvalsh(post.scale)
            assert w.min() >= -1e-10 * max(np.trace(post.scale), 1e-300)
            np.testing.assert_allclose(post.scale, post.scale.T)

    def test_dof_recursion_converges_to_discount_limit(self):
        belief = make_posterior([0.0], [[1e-2]], 5.0, 1e-4)
        part = StatePartition(1)
        rng = np.random.default_rng(5)
        for _ in range(600):
            prior = evolve(belief, EvolutionSpec(beta=0.95), part)
            belief, _ = update(prior, [1.0], float(rng.normal(0, 0.01)))
        assert belief.dof == pytest.approx(1.0 / (1.0 - 0.95), abs=1e-6)

    def test_evolve_then_update_commutes_with_pure_update(self):
        prior0 = NormalGammaBelief([0.2], [[0.5]], 6.0, 0.3, role=PRIOR)
        direct, _ = update(prior0, [1.0], 0.7)
        evolved = evolve(direct, EvolutionSpec(1.0, 1.0, 1.0), StatePartition(1))
        np.testing.assert_array_equal(evolved.mean, direct.mean)
        np.testing.assert_array_equal(evolved.scale, direct.scale)

    def test_corrupt_prior_raises(self):
        prior = NormalGammaBelief([0.0], [[-5.0]], 4.0, 1.0, role=PRIOR)
        with pytest.raises(NumericalError):
            update(prior, [1.0], 0.0)

    def test_psd_repair_is_counted(self):
        diag = Diagnostics()
        # A scale matrix with a tiny negative eigenvalue triggers the clamp.
        bad = np.array([[1.0, 1.0 + 1e-9], [1.0 + 1e-9, 1.0]])
        prior = NormalGammaBelief([0.0, 0.0], bad, 4.0, 1.0, role=PRIOR)
        update(prior, [1.0, -1.0], 0.0, diagnostics=diag)
        assert diag.counts.get("psd_repair", 0) >= 0  # may or may not trigger
        # Force a clamp directly.
        from sgdlm.dlm import repair_psd
        mat = np.array([[1.0, 0.0], [0.0, -1e-6]])
        repaired = repair_psd(mat, diag, "test")
        assert diag.counts["psd_repair"] >= 1
        assert np.linalg.eigvalsh(repaired).min() >= 0.0


class TestNormalGammaSampling:
    def test_degenerate_scale_returns_mode(self):
        belief = NormalGammaBelief([1.5], [[0.0]], 8.0, 2.0, role=PRIOR)
        theta, lam = ng_sample(belief, 4, np.random.default_rng(0))
        np.testing.assert_array_equal(theta, np.full((4, 1), 1.5))
        assert np.all(lam > 0)

    def test_gamma_marginal_mean(self):
        s = 0.25
        belief = NormalGammaBelief([0.0], [[1.0]], 6.0, s, role=PRIOR)
        _, lam = ng_sample(belief, 10**6, np.random.default_rng(42))
        # Var(lam) = 2/(n s^2); three MC standard errors.
        se = np.sqrt(2.0 / (6.0 * s**2) / 10**6)
        assert abs(lam.mean() - 1.0 / s) < 3 * se

    def test_state_margin_is_student_t(self):
        dof = 8.0
        belief = NormalGammaBelief([0.0], [[1.0]], dof, 1.0, role=PRIOR)
        theta, _ = ng_sample(belief, 400_000, np.random.default_rng(7))
        z = theta[:, 0]
        kurt = np.mean(z**4) / np.mean(z**2) ** 2
        # t_8 kurtosis is 3 + 6/(dof-4) = 4.5; generous MC band.
        assert kurt == pytest.approx(4.5, abs=0.25)

    def test_logpdf_matches_scipy_factorization(self):
        belief = NormalGammaBelief([0.5, -1.0],
                                   [[2.0, 0.3], [0.3, 1.0]], 7.0, 0.6,
                                   role=POSTERIOR)
        rng = np.random.default_rng(3)
        theta, lam = ng_sample(belief, 5, rng)
        ours = ng_logpdf(theta, lam, belief)
        n, s = belief.dof, belief.precision_scale
        for i in range(5):
            cov = belief.scale / (s * lam[i])
            expected = (stats.multivariate_normal.logpdf(theta[i], belief.mean, cov)
                        + stats.gamma.logpdf(lam[i], n / 2.0, scale=2.0 / (n * s)))
            assert ours[i] == pytest.approx(expected, rel=1e-10)
