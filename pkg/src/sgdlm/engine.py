"""Couples per-series beliefs into the multivariate model.

The joint one-step forecast is evaluated by Monte Carlo over draws from the
independent per-series priors. After observing the data, the exact joint
posterior is the product of individually updated normal/gammas reweighted by
the absolute determinant of (I - Gamma); a weighted sample from it is
projected back onto independent normal/gammas by moment matching (the
KL-minimizing member of the product family). The minimized KL divergence is
reported as a stress metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import digamma, logsumexp
from scipy.stats import t as student_t

from . import rng as rngmod
from .diagnostics import Diagnostics
from .dlm import (NormalGammaBelief, StatePartition, EvolutionSpec, PRIOR,
                  POSTERIOR, ng_sample, ng_logpdf, symmetrize)
from .errors import NumericalError

# Draws with |det(I - Gamma)| below this are treated as singular and dropped.
SINGULAR_LOG_DET = np.log(1e-12)
# Abort when more than this fraction of forecast draws is singular.
MAX_DROP_FRACTION = 0.10


@dataclass
class SgdlmModel:
    """State of the coupled model: one belief/partition/spec per series."""

    beliefs: list[NormalGammaBelief]
    partitions: list[StatePartition]
    evolution_specs: list[EvolutionSpec]

    def __post_init__(self):
        m = self.n_series
        for j, (belief, part) in enumerate(zip(self.beliefs, self.partitions)):
            if belief.dim != part.size:
                raise ValueError(f"series {j}: belief dim {belief.dim} != "
                                 f"partition size {part.size}")
            for parent in part.parent_ids:
                if parent == j:
                    raise ValueError(f"series {j} lists itself as parent")
                if not 0 <= parent < m:
                    raise ValueError(f"series {j}: parent {parent} out of range")

    @property
    def n_series(self) -> int:
        return len(self.beliefs)

    def default_predictors(self) -> list[np.ndarray]:
        """Local-level predictor values: leading 1, remaining entries 0."""
        out = []
        for part in self.partitions:
            x = np.zeros(part.n_phi)
            if part.n_phi:
                x[0] = 1.0
            out.append(x)
        return out


@dataclass
class WeightedSample:
    """Monte Carlo representation of the joint (states, precisions) law.

    ``states[j]`` has shape (n_draws, p_j); ``precisions`` is
    (n_draws, m). ``log_source_density`` holds the log density of each draw
    under the product of normal/gammas it was drawn from, which the entropy
    estimate needs.
    """

    states: list[np.ndarray]
    precisions: np.ndarray
    log_weights: np.ndarray
    normalized_weights: np.ndarray
    log_source_density: np.ndarray | None = None
    # Memoized (I - Gamma) terms; several per-step consumers share them.
    coupling_cache: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_draws(self) -> int:
        return self.precisions.shape[0]

    @property
    def n_series(self) -> int:
        return self.precisions.shape[1]

    @property
    def ess(self) -> float:
        return effective_sample_size(self.normalized_weights)


@dataclass
class ForecastMoments:
    """One-step forecast mean and covariance of the observation vector."""

    mean: np.ndarray
    covariance: np.ndarray
    n_draws: int


@dataclass
class VBStats:
    """Weighted moments produced while fitting one series' normal/gamma."""

    mean_lambda: float
    mean_log_lambda: float
    mean_lambda_theta: np.ndarray
    v_matrix: np.ndarray
    d_stat: float


@dataclass
class DecoupleResult:
    """Fitted per-series posteriors plus the KL stress metric."""

    beliefs: list[NormalGammaBelief]
    entropy: float
    entropy_raw: float
    stats: list[VBStats] = field(default_factory=list)


def normalize_log_weights(log_weights: np.ndarray) -> np.ndarray:
    """Exponentiate and normalize; exact uniform when weights are constant."""
    log_weights = np.asarray(log_weights, dtype=float)
    n = log_weights.shape[0]
    if np.all(log_weights == log_weights[0]):
        return np.full(n, 1.0 / n)
    shifted = log_weights - log_weights.max()
    w = np.exp(shifted)
    return w / w.sum()


def effective_sample_size(normalized_weights: np.ndarray) -> float:
    """ESS = 1 / sum of squared normalized weights; exactly R when uniform."""
    w = np.asarray(normalized_weights, dtype=float)
    n = w.shape[0]
    if np.all(w == w[0]):
        return float(n)
    return float(1.0 / np.sum(w * w))


def _series_rng(seed: int, step: int, purpose: int, series: int):
    return rngmod.substream(seed, step, purpose, series)


def _sample_product(beliefs: list[NormalGammaBelief], n_draws: int, seed: int,
                    step: int, purpose: int,
                    source_density: bool = True) -> WeightedSample:
    states: list[np.ndarray] = []
    precisions = np.empty((n_draws, len(beliefs)))
    log_src = np.zeros(n_draws) if source_density else None
    for j, belief in enumerate(beliefs):
        theta, lam = ng_sample(belief, n_draws, _series_rng(seed, step, purpose, j))
        states.append(theta)
        precisions[:, j] = lam
        if log_src is not None:
            log_src += ng_logpdf(theta, lam, belief)
    log_w = np.zeros(n_draws)
    return WeightedSample(states, precisions, log_w,
                          np.full(n_draws, 1.0 / n_draws), log_src)


def sample_prior(model: SgdlmModel, n_draws: int, seed: int, step: int = 0,
                 source_density: bool = True) -> WeightedSample:
    """Draw from the independent per-series priors with uniform weights."""
    for j, belief in enumerate(model.beliefs):
        if belief.role != PRIOR:
            raise ValueError(f"series {j}: sample_prior needs prior beliefs")
    return _sample_product(model.beliefs, n_draws, seed, step, rngmod.FORECAST,
                           source_density)


def build_gamma_matrix(state_vectors: list[np.ndarray],
                       partitions: list[StatePartition]) -> np.ndarray:
    """Assemble the simultaneous-coefficient matrix for one joint draw.

    Row j holds the parental coefficients of series j in the columns named
    by its partition; all other entries, including the diagonal, are zero.
    """
    m = len(partitions)
    gamma = np.zeros((m, m))
    for j, part in enumerate(partitions):
        if part.n_gamma == 0:
            continue
        if j in part.parent_ids:
            raise ValueError(f"series {j} lists itself as parent")
        vec = np.asarray(state_vectors[j], dtype=float).reshape(-1)
        gamma[j, list(part.parent_ids)] = vec[part.n_phi:]
    return gamma


def _stacked_gamma(states: list[np.ndarray],
                   partitions: list[StatePartition]) -> np.ndarray:
    """(n_draws, m, m) coefficient matrices for a whole sample."""
    m = len(partitions)
    n_draws = states[0].shape[0]
    gamma = np.zeros((n_draws, m, m))
    for j, part in enumerate(partitions):
        if part.n_gamma:
            gamma[:, j, list(part.parent_ids)] = states[j][:, part.n_phi:]
    return gamma


def _mu_matrix(sample: WeightedSample, partitions: list[StatePartition],
               predictors: list[np.ndarray]) -> np.ndarray:
    """Per-draw local levels mu[j] = x_j' phi_j, shape (n_draws, m)."""
    cols = []
    for j, part in enumerate(partitions):
        x = np.asarray(predictors[j], dtype=float).reshape(-1)
        if x.shape[0] != part.n_phi:
            raise ValueError(f"series {j}: predictor length {x.shape[0]} != "
                             f"n_phi {part.n_phi}")
        cols.append(sample.states[j][:, :part.n_phi] @ x)
    return np.column_stack(cols)


def _coupling_terms(sample: WeightedSample, partitions: list[StatePartition],
                    diagnostics: Diagnostics | None = None):
    """Shared per-draw quantities: (I - Gamma), log|det|, keep mask."""
    if sample.coupling_cache is not None and \
            sample.coupling_cache[0] is partitions:
        return sample.coupling_cache[1]
    m = len(partitions)
    eye = np.eye(m)
    coupling = eye - _stacked_gamma(sample.states, partitions)
    sign, logabs = np.linalg.slogdet(coupling)
    keep = np.isfinite(logabs) & (logabs > SINGULAR_LOG_DET)
    dropped = int(np.sum(~keep))
    if dropped and diagnostics is not None:
        diagnostics.warn("singular_forecast_draw",
                         f"dropped {dropped} of {sample.n_draws} draws")
    if dropped > MAX_DROP_FRACTION * sample.n_draws:
        raise NumericalError(
            f"{dropped}/{sample.n_draws} forecast draws singular: "
            "model badly conditioned")
    terms = (coupling, sign, logabs, keep)
    sample.coupling_cache = (partitions, terms)
    return terms


def forecast_moments(model: SgdlmModel, n_draws: int, seed: int,
                     predictors: list[np.ndarray] | None = None,
                     step: int = 0,
                     diagnostics: Diagnostics | None = None) -> ForecastMoments:
    """Monte Carlo one-step forecast mean and covariance."""
    sample = sample_prior(model, n_draws, seed, step)
    return forecast_moments_from_sample(model, sample, predictors,
                                        diagnostics=diagnostics)


def forecast_moments_from_sample(model: SgdlmModel, sample: WeightedSample,
                                 predictors: list[np.ndarray] | None = None,
                                 diagnostics: Diagnostics | None = None,
                                 full_covariance: bool = True,
                                 ) -> ForecastMoments:
    """Law-of-total-variance moments over the kept draws.

    With ``full_covariance`` off only the variance diagonal is computed
    (cheaper when no portfolio optimization consumes the covariance).
    """
    predictors = predictors if predictors is not None else model.default_predictors()
    mu = _mu_matrix(sample, model.partitions, predictors)
    coupling, _, _, keep = _coupling_terms(sample, model.partitions, diagnostics)

    coupling = coupling[keep]
    mu = mu[keep]
    lam = sample.precisions[keep]
    n_keep = coupling.shape[0]

    amu = np.linalg.solve(coupling, mu[..., None])[..., 0]
    inv = np.linalg.inv(coupling)
    mean = amu.mean(axis=0)
    dev = amu - mean
    if full_covariance:
        sigma = np.einsum("rij,rj,rkj->rik", inv, 1.0 / lam, inv)
        cov = symmetrize(sigma.mean(axis=0) + dev.T @ dev / n_keep)
    else:
        noise_var = np.einsum("rij,rj->i", inv * inv, 1.0 / lam) / n_keep
        cov = np.diag(noise_var + np.mean(dev * dev, axis=0))
    return ForecastMoments(mean, cov, n_keep)


def predictive_draws_from_sample(model: SgdlmModel, sample: WeightedSample,
                                 rng: np.random.Generator,
                                 predictors: list[np.ndarray] | None = None,
                                 ) -> np.ndarray:
    """Simulate one observation vector per kept draw (for quantiles)."""
    predictors = predictors if predictors is not None else model.default_predictors()
    mu = _mu_matrix(sample, model.partitions, predictors)
    coupling, _, _, keep = _coupling_terms(sample, model.partitions)
    coupling = coupling[keep]
    lam = sample.precisions[keep]
    noise = rng.standard_normal(lam.shape) / np.sqrt(lam)
    rhs = mu[keep] + noise
    return np.linalg.solve(coupling, rhs[..., None])[..., 0]


def predictive_log_density(model: SgdlmModel, observation: np.ndarray,
                           n_draws: int, seed: int,
                           predictors: list[np.ndarray] | None = None,
                           step: int = 0,
                           collapse_precisions: bool = True) -> float:
    """Log of the Monte Carlo one-step predictive density at the observation."""
    sample = sample_prior(model, n_draws, seed, step)
    return predictive_log_density_from_sample(model, sample, observation,
                                              predictors, collapse_precisions)


def predictive_log_density_from_sample(model: SgdlmModel,
                                       sample: WeightedSample,
                                       observation: np.ndarray,
                                       predictors: list[np.ndarray] | None = None,
                                       collapse_precisions: bool = True,
                                       ) -> float:
    """Mixture estimate of the one-step predictive density.

    With ``collapse_precisions`` the precisions are integrated out
    analytically: conditional on the state draws, the structural residuals
    (I - Gamma) y - mu are independent scaled Student-t's. This estimates
    the same integral as the plain normal mixture over (state, precision)
    draws, with far less Monte Carlo noise; the plain mixture remains
    available for diagnostics.
    """
    predictors = predictors if predictors is not None else model.default_predictors()
    y = np.asarray(observation, dtype=float).reshape(-1)
    m = model.n_series
    mu = _mu_matrix(sample, model.partitions, predictors)
    coupling, _, logabs, keep = _coupling_terms(sample, model.partitions)
    if not np.any(keep):
        raise NumericalError("all predictive draws singular")

    coupling, mu, logabs = coupling[keep], mu[keep], logabs[keep]
    # Residual mapped through (I - Gamma), where the noise is independent.
    v = np.einsum("rij,j->ri", coupling, y) - mu
    if collapse_precisions:
        dofs = np.array([b.dof for b in model.beliefs])
        scales = np.array([b.precision_scale for b in model.beliefs])
        log_pdf = logabs + np.sum(
            student_t.logpdf(v / np.sqrt(scales), dofs) - 0.5 * np.log(scales),
            axis=1)
    else:
        lam = sample.precisions[keep]
        quad = np.einsum("ri,ri->r", lam * v, v)
        log_det_sigma = -2.0 * logabs - np.log(lam).sum(axis=1)
        log_pdf = -0.5 * (m * np.log(2.0 * np.pi) + log_det_sigma + quad)
    return float(logsumexp(log_pdf) - np.log(log_pdf.shape[0]))


def recouple(model: SgdlmModel, n_draws: int, seed: int, step: int = 0,
             ess_floor: float | None = None,
             diagnostics: Diagnostics | None = None) -> WeightedSample:
    """Weighted joint posterior sample from the updated per-series beliefs.

    Draws from the product of posteriors and weights each draw by
    |det(I - Gamma)|, the coupling term the product form omits.
    """
    for j, belief in enumerate(model.beliefs):
        if belief.role != POSTERIOR:
            raise ValueError(f"series {j}: recouple needs updated posteriors")
    sample = _sample_product(model.beliefs, n_draws, seed, step, rngmod.RECOUPLE)
    sign, logabs = np.linalg.slogdet(
        np.eye(model.n_series) - _stacked_gamma(sample.states, model.partitions))
    finite = np.isfinite(logabs)
    if diagnostics is not None and len(set(sign[finite])) > 1:
        diagnostics.warn("determinant_sign_flip",
                         "sign of det(I - Gamma) varies across draws")
    log_w = np.where(finite, logabs, -np.inf)

    sample.log_weights = log_w
    sample.normalized_weights = normalize_log_weights(log_w)
    if ess_floor is not None and sample.ess < ess_floor and diagnostics is not None:
        diagnostics.warn("ess_floor",
                         f"ESS {sample.ess:.1f} below floor {ess_floor:.1f}")
    return sample


def solve_dof(mean_lambda: float, mean_log_lambda: float, p: int, d_stat: float,
              fallback: float | None = None,
              diagnostics: Diagnostics | None = None) -> float:
    """Degrees of freedom matching the weighted precision moments.

    Solves log(n + p - d) - psi(n/2) - (p - d)/n = log(2 E[lambda]) - E[log lambda]
    for n > max(0, d - p). The right side exceeds log 2 by Jensen whenever the
    precision draws are non-degenerate, which guarantees a root on the
    decreasing branch; with heavy Monte Carlo noise the bracket can fail, in
    which case ``fallback`` is used.
    """
    c = p - d_stat
    target = np.log(2.0 * mean_lambda) - mean_log_lambda
    lower = max(0.0, -c)

    def objective(n):
        return np.log(n + c) - digamma(n / 2.0) - c / n - target

    grid = lower + np.geomspace(1e-8, 1e9, 160)
    values = objective(grid)
    finite = np.isfinite(values)
    if not finite.any():
        return _dof_fallback(fallback, diagnostics, "no finite objective values")
    peak = int(np.nanargmax(np.where(finite, values, -np.inf)))
    if values[peak] <= 0.0:
        return _dof_fallback(fallback, diagnostics, "objective never positive")
    below = np.nonzero(finite & (values <= 0.0) & (np.arange(grid.size) > peak))[0]
    if below.size == 0:
        return _dof_fallback(fallback, diagnostics, "no sign change beyond peak")
    hi_idx = below[0]
    lo, hi = grid[hi_idx - 1], grid[hi_idx]
    return float(brentq(objective, lo, hi, xtol=1e-12, rtol=8.9e-16))


def _dof_fallback(fallback, diagnostics, reason):
    if fallback is None:
        raise NumericalError(f"degree-of-freedom solve failed: {reason}")
    if diagnostics is not None:
        diagnostics.warn("dof_solve_fallback", reason)
    return float(fallback)


def _fit_series(sample: WeightedSample, j: int, p: int,
                prev_dof: float | None,
                diagnostics: Diagnostics | None) -> tuple[NormalGammaBelief, VBStats]:
    w = sample.normalized_weights
    lam = sample.precisions[:, j]
    theta = sample.states[j]

    e_lam = float(w @ lam)
    e_log_lam = float(w @ np.log(lam))
    wl = w * lam
    mean = (wl @ theta) / e_lam
    diff = theta - mean
    v_mat = symmetrize(np.einsum("r,ri,rj->ij", wl, diff, diff))

    # Point-mass coordinates (exactly zero spread, e.g. a coefficient at the
    # end of its phase-out) stay deterministic; the fit runs on the rest. A
    # tiny relative ridge keeps weighted Monte Carlo covariances factorable
    # even when the effective sample barely covers the dimension.
    active = np.diag(v_mat) > 0.0
    p_eff = int(active.sum())
    if p_eff:
        idx = np.ix_(active, active)
        sub = v_mat[idx]
        ridge = 1e-10 * max(np.trace(sub) / p_eff, np.finfo(float).tiny)
        for _ in range(4):
            sub_r = sub + ridge * np.eye(p_eff)
            try:
                np.linalg.cholesky(sub_r)
                break
            except np.linalg.LinAlgError:
                ridge *= 1e3
                if diagnostics is not None:
                    diagnostics.warn("vb_singular_v", f"series {j}")
        sub = sub_r
        v_mat[idx] = sub
        diff_sub = diff[:, active]
        solved = np.linalg.solve(sub, diff_sub.T)
        d_stat = float(wl @ np.einsum("ri,ir->r", diff_sub, solved))
    else:
        d_stat = 0.0
    if diagnostics is not None and d_stat > p_eff + 0.5:
        diagnostics.warn("vb_d_exceeds_dim",
                         f"series {j}: d={d_stat:.2f}, p={p_eff}")

    fallback = None if prev_dof is None else prev_dof + 1.0
    n = solve_dof(e_lam, e_log_lam, p_eff, d_stat, fallback, diagnostics)
    s = (n + p_eff - d_stat) / (n * e_lam)
    c_mat = s * v_mat
    belief = NormalGammaBelief(mean, c_mat, n, s, role=POSTERIOR)
    stats = VBStats(e_lam, e_log_lam, wl @ theta, v_mat, d_stat)
    return belief, stats


def vb_decouple(sample: WeightedSample, partitions: list[StatePartition],
                prev_dofs: list[float] | None = None,
                diagnostics: Diagnostics | None = None) -> DecoupleResult:
    """Project the weighted joint posterior onto independent normal/gammas.

    Per series the fit matches the weighted moments E[lam], E[log lam],
    E[lam theta], and E[lam (theta-m)(theta-m)'] of the sample, which are the
    stationarity conditions of minimizing KL(sample || product form).
    """
    beliefs: list[NormalGammaBelief] = []
    stats: list[VBStats] = []
    for j, part in enumerate(partitions):
        prev = None if prev_dofs is None else prev_dofs[j]
        belief, st = _fit_series(sample, j, part.size, prev, diagnostics)
        beliefs.append(belief)
        stats.append(st)
    raw = _entropy_raw(sample, beliefs)
    return DecoupleResult(beliefs, max(0.0, raw), raw, stats)


def weight_entropy(sample: WeightedSample) -> float:
    """KL contribution of the importance weights alone.

    This is the divergence of the product-form source from the reweighted
    posterior when the fitted product equals the source exactly; it is the
    whole divergence whenever the decoupling keeps the updated conjugate
    posteriors unchanged.
    """
    log_w = sample.log_weights
    if np.all(log_w == log_w[0]):
        return 0.0
    log_z = logsumexp(log_w) - np.log(sample.n_draws)
    return float(sample.normalized_weights @ (log_w - log_z))


def _entropy_raw(sample: WeightedSample,
                 decoupled: list[NormalGammaBelief]) -> float:
    if sample.ess < 2.0:
        return float("inf")
    if sample.log_source_density is None:
        raise ValueError("sample lacks log_source_density; cannot estimate KL")
    w = sample.normalized_weights
    n = sample.n_draws
    log_q = np.zeros(n)
    for j, belief in enumerate(decoupled):
        log_q += ng_logpdf(sample.states[j], sample.precisions[:, j], belief)
    density_term = float(w @ (sample.log_source_density - log_q))
    return weight_entropy(sample) + density_term


def entropy_metric(sample: WeightedSample,
                   decoupled: list[NormalGammaBelief]) -> float:
    """KL divergence of the decoupled fit from the joint posterior, clamped at 0.

    Infinite when the weights are too degenerate to estimate anything
    (ESS < 2).
    """
    return max(0.0, _entropy_raw(sample, decoupled))
