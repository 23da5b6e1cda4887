"""Matrix-normal / inverse-Wishart multivariate DLM.

The classical benchmark forecaster: a common predictor vector for all
series, conjugate matrix-normal/inverse-Wishart updating, and deterministic
discount evolution of both the state scale and the Wishart sum-of-squares
matrix. Also supplies the running precision-matrix estimate that drives
parental-set proposals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import Diagnostics
from .dlm import PRIOR, POSTERIOR, symmetrize
from .errors import NumericalError


@dataclass
class MatrixNIWBelief:
    """Belief over (state matrix, observation covariance).

    ``state_mode`` is p x m (one column per series), ``state_scale`` the
    p x p within-column scale, ``sum_squares`` the m x m Wishart
    sum-of-squares matrix with ``dof`` degrees of freedom.
    """

    state_mode: np.ndarray
    state_scale: np.ndarray
    dof: float
    sum_squares: np.ndarray
    role: str = POSTERIOR

    def __post_init__(self):
        self.state_mode = np.atleast_2d(np.asarray(self.state_mode, dtype=float))
        self.state_scale = np.asarray(self.state_scale, dtype=float)
        self.sum_squares = np.asarray(self.sum_squares, dtype=float)
        if self.dof <= 0:
            raise ValueError("dof must be positive")
        p, m = self.state_mode.shape
        if self.state_scale.shape != (p, p):
            raise ValueError("state_scale shape mismatch")
        if self.sum_squares.shape != (m, m):
            raise ValueError("sum_squares shape mismatch")

    @property
    def n_series(self) -> int:
        return self.state_mode.shape[1]

    @property
    def n_predictors(self) -> int:
        return self.state_mode.shape[0]


def initial_belief(n_series: int, n_predictors: int = 1,
                   state_var: float = 1e-2,
                   obs_var: float = 1e-4) -> MatrixNIWBelief:
    """Weakly informative starting posterior at daily-log-return scale.

    dof = m + 2 keeps the prior covariance mean defined and equal to
    ``obs_var`` times the identity.
    """
    dof = n_series + 2.0
    sum_squares = obs_var * (dof - 2.0) * np.eye(n_series)
    return MatrixNIWBelief(np.zeros((n_predictors, n_series)),
                           state_var * np.eye(n_predictors), dof, sum_squares,
                           role=POSTERIOR)


def wdlm_evolve(posterior: MatrixNIWBelief, delta: float,
                beta: float) -> MatrixNIWBelief:
    """Discount evolution: random-walk states, Beta-Bartlett volatility map."""
    if posterior.role != POSTERIOR:
        raise ValueError("wdlm_evolve expects a posterior belief")
    m = posterior.n_series
    r = beta * posterior.dof
    b_mat = posterior.sum_squares * ((r + m - 1.0) / (posterior.dof + m - 1.0))
    return MatrixNIWBelief(posterior.state_mode.copy(),
                           posterior.state_scale / delta, r, b_mat, role=PRIOR)


def wdlm_forecast(prior: MatrixNIWBelief, regressor: np.ndarray,
                  ) -> tuple[np.ndarray, np.ndarray, float]:
    """One-step multivariate-T forecast: (mode, scale matrix, dof).

    The forecast covariance is scale * dof / (dof - 2) when dof > 2.
    """
    f_vec = np.asarray(regressor, dtype=float).reshape(-1)
    mode = f_vec @ prior.state_mode
    q = 1.0 + f_vec @ prior.state_scale @ f_vec
    scale = q * prior.sum_squares / prior.dof
    return mode, scale, prior.dof


def forecast_covariance(scale: np.ndarray, dof: float) -> np.ndarray:
    if dof <= 2.0:
        raise NumericalError(f"forecast covariance undefined at dof={dof:.2f} <= 2")
    return scale * (dof / (dof - 2.0))


def wdlm_update(prior: MatrixNIWBelief, regressor: np.ndarray,
                observation: np.ndarray) -> MatrixNIWBelief:
    """Conjugate posterior update given the realized observation vector."""
    if prior.role != PRIOR:
        raise ValueError("wdlm_update expects a prior belief")
    f_vec = np.asarray(regressor, dtype=float).reshape(-1)
    y = np.asarray(observation, dtype=float).reshape(-1)

    rf = prior.state_scale @ f_vec
    q = 1.0 + f_vec @ rf
    if q <= 0.0:
        raise NumericalError(f"forecast variance factor q={q:.3e} <= 0")
    e = y - f_vec @ prior.state_mode
    adapt = rf / q

    mode = prior.state_mode + np.outer(adapt, e)
    scale = symmetrize(prior.state_scale - np.outer(adapt, adapt) * q)
    sum_squares = symmetrize(prior.sum_squares + np.outer(e, e) / q)
    return MatrixNIWBelief(mode, scale, prior.dof + 1.0, sum_squares,
                           role=POSTERIOR)


def precision_estimate(posterior: MatrixNIWBelief,
                       diagnostics: Diagnostics | None = None) -> np.ndarray:
    """Inverse of the sum-of-squares matrix, used for within-row rankings.

    Any positive multiple gives the same rankings, so no dof normalization
    is applied. Near-singular matrices get a small ridge first.
    """
    d_mat = symmetrize(posterior.sum_squares)
    try:
        chol = np.linalg.cholesky(d_mat)
    except np.linalg.LinAlgError:
        chol = None
    if chol is None or np.min(np.diag(chol)) ** 2 < 1e-14 * np.trace(d_mat):
        if diagnostics is not None:
            diagnostics.warn("precision_ridge", "sum-of-squares near singular")
        d_mat = d_mat + 1e-10 * np.trace(d_mat) * np.eye(d_mat.shape[0])
    omega = np.linalg.inv(d_mat)
    return symmetrize(omega)
