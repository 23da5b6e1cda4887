"""Equality-constrained mean-variance portfolio rules and trade accounting.

All optimizers minimize the forecast portfolio variance w'Pw subject to
equality constraints (budget, optional target return, optional benchmark
neutrality) via the KKT linear system. Short selling is allowed; there are
no box constraints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dlm import symmetrize
from .errors import ConstraintError, RuinError

# Relative ridge applied to the covariance before the KKT solve; Monte Carlo
# covariance estimates can be numerically singular.
RIDGE_REL = 1e-10


@dataclass
class PortfolioProblem:
    """Quadratic program: minimize w'Pw subject to A w = b (rows of A given
    as (vector, rhs) pairs, budget constraint first)."""

    mean: np.ndarray
    covariance: np.ndarray
    constraints: list[tuple[np.ndarray, float]]


@dataclass
class TradeDecision:
    target_weights: np.ndarray
    executed_weights: np.ndarray
    turnover: float
    cost: float

    @property
    def traded(self) -> bool:
        return self.turnover > 0.0


def _orthonormalize_constraints(constraints) -> tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt over constraint rows, carrying the right-hand sides.

    Linear combinations preserve the feasible set, so redundant rows (zero
    residual direction, consistent rhs) are dropped silently; a dependent row
    with an inconsistent rhs has an empty feasible set and raises.
    """
    kept_rows: list[np.ndarray] = []
    kept_rhs: list[float] = []
    for index, (vec, b) in enumerate(constraints):
        u = np.asarray(vec, dtype=float).reshape(-1).copy()
        c = float(b)
        base = max(np.linalg.norm(u), 1.0)
        for row, rhs in zip(kept_rows, kept_rhs):
            coef = u @ row
            u -= coef * row
            c -= coef * rhs
        norm = np.linalg.norm(u)
        if norm <= 1e-12 * base:
            if abs(c) > 1e-8 * (1.0 + abs(b)):
                raise ConstraintError(
                    f"constraint {index} is inconsistent with earlier "
                    "constraints (infeasible)", constraint_index=index)
            continue
        kept_rows.append(u / norm)
        kept_rhs.append(c / norm)
    return np.vstack(kept_rows), np.asarray(kept_rhs)


def solve_equality_qp(problem: PortfolioProblem) -> np.ndarray:
    """Unique minimizer of w'Pw subject to the equality constraints.

    The covariance is normalized and lightly ridged before the KKT solve;
    constraint rows are orthonormalized so redundant-but-consistent rows
    (e.g. a zero covariance column under benchmark neutrality) drop out
    instead of making the system singular.
    """
    p_mat = symmetrize(np.asarray(problem.covariance, dtype=float))
    m = p_mat.shape[0]
    scale = max(np.trace(p_mat) / m, np.finfo(float).tiny)
    p_hat = p_mat / scale + RIDGE_REL * np.eye(m)

    c_mat, rhs_c = _orthonormalize_constraints(problem.constraints)
    k = c_mat.shape[0]

    kkt = np.zeros((m + k, m + k))
    kkt[:m, :m] = 2.0 * p_hat
    kkt[:m, m:] = c_mat.T
    kkt[m:, :m] = c_mat
    rhs = np.concatenate([np.zeros(m), rhs_c])

    try:
        solution = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        raise ConstraintError("KKT system singular despite independent "
                              "constraints (covariance degenerate)") from None
    w = solution[:m]
    if not np.all(np.isfinite(w)):
        raise ConstraintError("KKT solution not finite (covariance degenerate)")
    return w


def _budget(m: int) -> tuple[np.ndarray, float]:
    return np.ones(m), 1.0


def min_variance(mean: np.ndarray, covariance: np.ndarray) -> np.ndarray:
    """Fully invested portfolio with minimal forecast variance."""
    m = len(mean)
    return solve_equality_qp(PortfolioProblem(mean, covariance, [_budget(m)]))


def target_return(mean: np.ndarray, covariance: np.ndarray,
                  tau: float) -> np.ndarray:
    """Minimum-variance portfolio with forecast return pinned at tau."""
    m = len(mean)
    constraints = [_budget(m), (np.asarray(mean, dtype=float), float(tau))]
    return solve_equality_qp(PortfolioProblem(mean, covariance, constraints))


def benchmark_neutral(mean: np.ndarray, covariance: np.ndarray,
                      tau: float | None = None,
                      benchmark: int = 0) -> np.ndarray:
    """Portfolio with zero benchmark holding and zero forecast covariance
    with the benchmark, optionally pinned at a target return."""
    m = len(mean)
    cov = np.asarray(covariance, dtype=float)
    hold_zero = np.zeros(m)
    hold_zero[benchmark] = 1.0
    constraints = [_budget(m), (hold_zero, 0.0), (cov[:, benchmark].copy(), 0.0)]
    if tau is not None:
        constraints.append((np.asarray(mean, dtype=float), float(tau)))
    return solve_equality_qp(PortfolioProblem(mean, cov, constraints))


def churn_adjust(current: np.ndarray, target: np.ndarray, mean: np.ndarray,
                 cost_rate: float) -> TradeDecision:
    """Trade only when the expected gain covers the trading cost.

    Gain and cost are both linear in the fraction traded, so partial updates
    have no interior optimum: either the move pays for itself and is executed
    fully, or the weights stay put. With no trading cost the mechanism is
    vacuous and the target is always taken.
    """
    current = np.asarray(current, dtype=float)
    target = np.asarray(target, dtype=float)
    delta = target - current
    turnover = float(np.abs(delta).sum())
    gain = float(np.asarray(mean, dtype=float) @ delta)
    cost = cost_rate * turnover
    if turnover > 0.0 and (cost_rate == 0.0 or gain >= cost):
        return TradeDecision(target, target.copy(), turnover, cost)
    return TradeDecision(target, current.copy(), 0.0, 0.0)


def realized_step(executed: np.ndarray, returns: np.ndarray,
                  cost: float) -> float:
    """Net portfolio log-return for one day.

    Log-returns convert to simple returns before weighting; the cost (already
    in return units) is subtracted from the log-return.
    """
    gross = float(np.asarray(executed, dtype=float)
                  @ np.exp(np.asarray(returns, dtype=float)))
    if gross <= 0.0:
        raise RuinError(f"portfolio simple return {gross:.3e} <= 0")
    return float(np.log(gross) - cost)


def drift_weights(executed: np.ndarray, returns: np.ndarray) -> np.ndarray:
    """Weights after one day of returns, renormalized to sum to one."""
    held = np.asarray(executed, dtype=float) * np.exp(np.asarray(returns, dtype=float))
    total = held.sum()
    if total <= 0.0:
        raise RuinError(f"portfolio simple return {total:.3e} <= 0")
    return held / total
