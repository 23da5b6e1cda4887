"""Univariate conjugate DLM machinery with discount stochastic volatility.

Each series carries a normal/gamma belief over its state vector and
observation precision. With belief parameters ``(m, C, n, s)``, the state
given the precision is ``N(m, C / (s * lam))`` and the precision is
``Gamma(n/2, rate = n*s/2)`` (mean ``1/s``); the state margin is
multivariate T with ``n`` degrees of freedom, mode ``m``, scale ``C``.

Priors evolve by block discounting (separate factors for the external
predictor block and the parental-coefficient block) and a volatility
discount on the degrees of freedom. The one-step posterior update is closed
form. All functions are pure: series can be filtered in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .diagnostics import Diagnostics
from .errors import NumericalError

PRIOR = "prior"
POSTERIOR = "posterior"

# Eigenvalue tolerance, relative to trace, below which a scale matrix is
# treated as indefinite rather than merely drifted.
PSD_REL_TOL = 1e-10


@dataclass(frozen=True)
class StatePartition:
    """Layout of a state vector: external-predictor block then parent block.

    ``parent_ids`` gives, in order, the series whose contemporaneous values
    multiply the parental-coefficient block.
    """

    n_phi: int
    parent_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_phi < 0:
            raise ValueError("n_phi must be non-negative")
        if len(set(self.parent_ids)) != len(self.parent_ids):
            raise ValueError("parent_ids must be distinct")

    @property
    def n_gamma(self) -> int:
        return len(self.parent_ids)

    @property
    def size(self) -> int:
        return self.n_phi + self.n_gamma


@dataclass(frozen=True)
class EvolutionSpec:
    """Discount factors and (diagonal) transition for one series.

    ``transition_diag`` defaults to the identity; phase-out shrinkage of
    outgoing parents is injected through it.
    """

    delta_phi: float = 1.0
    delta_gamma: float = 1.0
    beta: float = 1.0
    transition_diag: np.ndarray | None = None

    def __post_init__(self):
        for name in ("delta_phi", "delta_gamma", "beta"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")


@dataclass
class NormalGammaBelief:
    """Conjugate normal/gamma belief over (state, precision) for one series."""

    mean: np.ndarray
    scale: np.ndarray
    dof: float
    precision_scale: float
    role: str = POSTERIOR

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.scale = np.asarray(self.scale, dtype=float)
        p = self.mean.shape[0]
        if self.scale.shape != (p, p):
            raise ValueError(f"scale must be {p}x{p}, got {self.scale.shape}")
        if self.dof <= 0 or self.precision_scale <= 0:
            raise ValueError("dof and precision_scale must be positive")
        if self.role not in (PRIOR, POSTERIOR):
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def validate(self) -> None:
        """Check the PSD invariant (eigenvalues >= -tol * scale norm)."""
        w = np.linalg.eigvalsh(symmetrize(self.scale))
        norm = max(np.abs(w).max(), np.finfo(float).tiny)
        if w.min() < -PSD_REL_TOL * norm:
            raise NumericalError(f"scale matrix indefinite: min eigenvalue {w.min():.3e}")


@dataclass
class UpdateStats:
    """Diagnostics from one conjugate update."""

    forecast_error: float
    forecast_var: float
    adaptive_vector: np.ndarray
    vol_update: float


def symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def repair_psd(mat: np.ndarray, diagnostics: Diagnostics | None = None,
               label: str = "") -> np.ndarray:
    """Clamp negative eigenvalues to zero when they breach the PSD tolerance."""
    mat = symmetrize(mat)
    w = np.linalg.eigvalsh(mat)
    trace = max(np.trace(mat), np.finfo(float).tiny)
    if w.min() >= -PSD_REL_TOL * trace:
        return mat
    if diagnostics is not None:
        diagnostics.warn("psd_repair", f"{label} min eigenvalue {w.min():.3e}")
    w2, vecs = np.linalg.eigh(mat)
    return symmetrize((vecs * np.clip(w2, 0.0, None)) @ vecs.T)


def psd_factor(mat: np.ndarray) -> np.ndarray:
    """Factor L with L @ L.T = mat; tolerates semi-definite input."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        w, vecs = np.linalg.eigh(symmetrize(mat))
        return vecs * np.sqrt(np.clip(w, 0.0, None))


def evolve(posterior: NormalGammaBelief, spec: EvolutionSpec,
           partition: StatePartition) -> NormalGammaBelief:
    """Evolve a posterior one step into the next prior.

    The transition scales the mean and scale matrix, block discounting
    inflates the scale (phi block by 1/delta_phi, gamma block by
    1/delta_gamma, cross block by their geometric mean), the degrees of
    freedom discount by beta, and the precision scale carries forward.
    """
    if posterior.role != POSTERIOR:
        raise ValueError("evolve expects a posterior belief")
    p = partition.size
    if posterior.dim != p:
        raise ValueError(f"belief dimension {posterior.dim} != partition size {p}")
    g = (np.ones(p) if spec.transition_diag is None
         else np.asarray(spec.transition_diag, dtype=float))
    if g.shape != (p,):
        raise ValueError("transition_diag length must match state dimension")

    a = g * posterior.mean
    b_mat = (g[:, None] * posterior.scale) * g[None, :]
    d = np.concatenate([
        np.full(partition.n_phi, 1.0 / np.sqrt(spec.delta_phi)),
        np.full(partition.n_gamma, 1.0 / np.sqrt(spec.delta_gamma)),
    ])
    r_mat = symmetrize(b_mat * np.outer(d, d))

    w = np.linalg.eigvalsh(r_mat)
    trace = max(np.trace(r_mat), np.finfo(float).tiny)
    if w.min() < -PSD_REL_TOL * trace:
        raise NumericalError(
            f"prior scale matrix indefinite after discounting "
            f"(min eigenvalue {w.min():.3e})")

    return NormalGammaBelief(a, r_mat, spec.beta * posterior.dof,
                             posterior.precision_scale, role=PRIOR)


def update(prior: NormalGammaBelief, regressor: np.ndarray, observation: float,
           diagnostics: Diagnostics | None = None,
           ) -> tuple[NormalGammaBelief, UpdateStats]:
    """One-step conjugate posterior update given the realized observation."""
    if prior.role != PRIOR:
        raise ValueError("update expects a prior belief")
    f_vec = np.asarray(regressor, dtype=float).reshape(-1)
    if f_vec.shape[0] != prior.dim:
        raise ValueError("regressor length must match state dimension")

    a, r_mat = prior.mean, prior.scale
    r_dof, s = prior.dof, prior.precision_scale

    rf = r_mat @ f_vec
    q = s + f_vec @ rf
    if q <= 0.0:
        raise NumericalError(f"forecast variance factor q={q:.3e} <= 0: "
                             "prior scale matrix corrupt")
    e = float(observation) - f_vec @ a
    adapt = rf / q
    z = (r_dof + e * e / q) / (r_dof + 1.0)

    m = a + adapt * e
    c_mat = (r_mat - np.outer(adapt, adapt) * q) * z
    c_mat = repair_psd(c_mat, diagnostics, "posterior scale")

    posterior = NormalGammaBelief(m, c_mat, r_dof + 1.0, z * s, role=POSTERIOR)
    return posterior, UpdateStats(e, q, adapt, z)


def ng_sample(belief: NormalGammaBelief, n_draws: int,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (states, precisions) from a normal/gamma belief.

    Returns arrays of shape (n_draws, p) and (n_draws,).
    """
    n, s = belief.dof, belief.precision_scale
    lam = rng.gamma(shape=n / 2.0, scale=2.0 / (n * s), size=n_draws)
    factor = psd_factor(belief.scale)
    z = rng.standard_normal((n_draws, belief.dim))
    theta = belief.mean + (z @ factor.T) / np.sqrt(s * lam)[:, None]
    return theta, lam


def ng_logpdf(theta: np.ndarray, lam: np.ndarray,
              belief: NormalGammaBelief) -> np.ndarray:
    """Joint log density of (state, precision) draws under a normal/gamma.

    Coordinates with exactly zero scale (point masses, e.g. a parental
    coefficient at the end of its phase-out) contribute nothing to the log
    density as long as the draw sits at the mode; off-mode draws get -inf.
    """
    theta = np.atleast_2d(theta)
    lam = np.asarray(lam, dtype=float)
    n, s = belief.dof, belief.precision_scale

    active = np.diag(belief.scale) > 0.0
    p_eff = int(active.sum())
    if p_eff:
        sub = belief.scale[np.ix_(active, active)]
        try:
            chol = np.linalg.cholesky(sub)
        except np.linalg.LinAlgError:
            # Numerically semidefinite (e.g. after an eigenvalue clamp):
            # evaluate the density of an infinitesimally inflated version.
            sub = sub + 1e-12 * np.trace(sub) * np.eye(p_eff)
            chol = np.linalg.cholesky(sub)
        diff = theta[:, active] - belief.mean[active]
        sol = solve_triangular(chol, diff.T, lower=True)
        quad = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        log_norm = (-0.5 * p_eff * np.log(2.0 * np.pi) - 0.5 * logdet
                    + 0.5 * p_eff * np.log(s * lam) - 0.5 * s * lam * quad)
    else:
        log_norm = np.zeros(theta.shape[0])

    shape, rate = n / 2.0, n * s / 2.0
    log_gamma = (shape * np.log(rate) - gammaln(shape)
                 + (shape - 1.0) * np.log(lam) - rate * lam)
    out = log_norm + log_gamma
    if p_eff < belief.dim:
        off_mode = np.any(theta[:, ~active] != belief.mean[~active], axis=1)
        out = np.where(off_mode, -np.inf, out)
    return out
