"""Daily filtering loop, ledger, metrics, and CSV export.

One step of the cycle: evolve priors, Monte Carlo one-step forecast, solve
and execute the portfolio rules, observe the day's returns, run the
per-series conjugate updates (regressors include the realized parent
values), recouple by importance weighting, decouple variationally, and
revise the parental sets. The runner only ever sees one observation row at
a time, so decisions structurally cannot look ahead.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import multivariate_t, t as student_t

from . import engine, portfolio, rng as rngmod, selection, wdlm
from .config import (MODEL_SGDLM, PREDICTOR_LOCAL_LEVEL, RunConfig,
                     StrategySpec, TRADING_DAYS_PER_YEAR)
from .data import ReturnsPanel
from .diagnostics import Diagnostics
from .dlm import EvolutionSpec, NormalGammaBelief, POSTERIOR, StatePartition, evolve, update
from .errors import NumericalError, RuinError, SgdlmError

ERROR_WINDOW = 5  # days of past forecast errors feeding the lagged predictor


def compute_predictor(error_history: list[np.ndarray], form: str,
                      n_series: int) -> list[np.ndarray]:
    """Per-series predictor values from past one-step forecast errors.

    The local-level form is the constant 1. The lagged-error form appends
    the average forecast error over the trailing window; while fewer errors
    are available the average runs over what exists (zero at the start).
    """
    if form == PREDICTOR_LOCAL_LEVEL:
        return [np.ones(1) for _ in range(n_series)]
    recent = error_history[-ERROR_WINDOW:]
    if recent:
        avg = np.mean(np.vstack(recent), axis=0)
    else:
        avg = np.zeros(n_series)
    return [np.array([1.0, avg[j]]) for j in range(n_series)]


@dataclass
class BacktestLedger:
    """Append-only per-day record plus cumulative summaries."""

    dates: list[str] = field(default_factory=list)
    series_ids: list[str] = field(default_factory=list)
    strategy_names: list[str] = field(default_factory=list)

    forecast_mean: list[np.ndarray] = field(default_factory=list)
    forecast_sd: list[np.ndarray] = field(default_factory=list)
    interval_lo: list[np.ndarray] = field(default_factory=list)
    interval_hi: list[np.ndarray] = field(default_factory=list)
    abs_errors: list[np.ndarray] = field(default_factory=list)
    log_density: list[float] = field(default_factory=list)
    ess: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    entropy_raw: list[float] = field(default_factory=list)
    core_change: list[float] = field(default_factory=list)

    returns: dict[str, list[float]] = field(default_factory=dict)
    costs: dict[str, list[float]] = field(default_factory=dict)
    turnover: dict[str, list[float]] = field(default_factory=dict)
    values: dict[str, list[float]] = field(default_factory=dict)

    membership: list[tuple[str, str, str, str]] = field(default_factory=list)
    ruin_events: dict[str, str] = field(default_factory=dict)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    summary: dict = field(default_factory=dict)
    start_value: float = 1000.0

    @property
    def n_days(self) -> int:
        return len(self.dates)


@dataclass
class _StrategyState:
    spec: StrategySpec
    weights: np.ndarray | None = None
    value: float = 1000.0
    halted: bool = False


class FilterRunner:
    """Streaming filter: feed one observation row per call to `step`."""

    def __init__(self, config: RunConfig, series_ids: list[str],
                 benchmark_index: int = 0):
        self.config = config
        self.series_ids = list(series_ids)
        self.benchmark = benchmark_index
        self.m = len(series_ids)
        self.t = 0
        self.diagnostics = Diagnostics()
        self.ledger = BacktestLedger(
            series_ids=list(series_ids),
            strategy_names=[s.name for s in config.strategy_specs()],
            diagnostics=self.diagnostics,
            start_value=config.start_value)
        for name in self.ledger.strategy_names:
            self.ledger.returns[name] = []
            self.ledger.costs[name] = []
            self.ledger.turnover[name] = []
            self.ledger.values[name] = []
        self._strategies = [_StrategyState(spec, value=config.start_value)
                            for spec in config.strategy_specs()]
        self._error_history: list[np.ndarray] = []
        self._pool = (ThreadPoolExecutor(max_workers=config.threads)
                      if config.threads > 1 else None)

        if config.model_kind == MODEL_SGDLM:
            self._init_sgdlm()
        else:
            self._wdlm_belief = wdlm.initial_belief(
                self.m, 1, config.prior.phi_var, config.prior.scale)

    # -- initialization -------------------------------------------------

    def _init_sgdlm(self) -> None:
        cfg = self.config
        initial = cfg.initial_parents
        self._beliefs: list[NormalGammaBelief] = []
        self._partitions: list[StatePartition] = []
        self._sets: list[selection.ParentalSets] = []
        sel = cfg.selection
        if not cfg.benchmark_eligible:
            sel = replace(sel, ineligible=sel.ineligible | {self.benchmark})
        self._selection_cfg = sel

        for j in range(self.m):
            parents = tuple(sorted(initial[j])) if initial is not None else ()
            part = StatePartition(cfg.n_phi, parents)
            mean = np.zeros(part.size)
            diag = np.concatenate([np.full(cfg.n_phi, cfg.prior.phi_var),
                                   np.full(part.n_gamma, cfg.prior.gamma_var)])
            belief = NormalGammaBelief(mean, np.diag(diag), cfg.prior.dof,
                                       cfg.prior.scale, role=POSTERIOR)
            self._beliefs.append(belief)
            self._partitions.append(part)
            self._sets.append(selection.ParentalSets(j, core=set(parents)))

        if cfg.selection_enabled:
            self._proposal_belief = wdlm.initial_belief(
                self.m, 1, cfg.prior.phi_var, cfg.prior.scale)

    # -- helpers ---------------------------------------------------------

    def _map(self, fn, items):
        if self._pool is not None:
            return list(self._pool.map(fn, items))
        return [fn(item) for item in items]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- public API ------------------------------------------------------

    def step(self, date: str, observation: np.ndarray) -> None:
        y = np.asarray(observation, dtype=float).reshape(-1)
        if y.shape[0] != self.m:
            raise SgdlmError(f"{date}: observation has {y.shape[0]} entries, "
                             f"expected {self.m}")
        try:
            if self.config.model_kind == MODEL_SGDLM:
                self._step_sgdlm(date, y)
            else:
                self._step_wdlm(date, y)
        except RuinError:
            raise
        except SgdlmError as exc:
            raise type(exc)(f"{date}: {exc}") from exc
        self.t += 1

    def finish(self) -> BacktestLedger:
        self.close()
        self.ledger.summary = metrics(self.ledger)
        return self.ledger

    # -- shared stages ----------------------------------------------------

    def _trade(self, p_t: np.ndarray, cov: np.ndarray
               ) -> dict[str, portfolio.TradeDecision | None]:
        decisions: dict[str, portfolio.TradeDecision | None] = {}
        for state in self._strategies:
            if state.halted:
                decisions[state.spec.name] = None
                continue
            target = self._target_weights(state.spec, p_t, cov)
            if state.weights is None:
                decision = portfolio.TradeDecision(target, target.copy(), 0.0, 0.0)
            elif state.spec.churn:
                decision = portfolio.churn_adjust(state.weights, target, p_t,
                                                  self.config.cost_rate)
            else:
                turn = float(np.abs(target - state.weights).sum())
                decision = portfolio.TradeDecision(
                    target, target.copy(), turn, self.config.cost_rate * turn)
            state.weights = decision.executed_weights
            decisions[state.spec.name] = decision
        return decisions

    def _target_weights(self, spec: StrategySpec, p_t: np.ndarray,
                        cov: np.ndarray) -> np.ndarray:
        if spec.kind == "passive":
            w = np.zeros(self.m)
            w[self.benchmark] = 1.0
            return w
        if spec.kind == "equal":
            return np.full(self.m, 1.0 / self.m)
        tau = spec.tau
        while True:
            try:
                if spec.neutral:
                    return portfolio.benchmark_neutral(p_t, cov, tau, self.benchmark)
                if tau is not None:
                    return portfolio.target_return(p_t, cov, tau)
                return portfolio.min_variance(p_t, cov)
            except portfolio.ConstraintError:
                # A degenerate forecast mean (e.g. all zeros under the
                # initial prior) makes the return target unattainable; run
                # the same rule without it for the day.
                if tau is None:
                    raise
                self.diagnostics.warn("target_return_infeasible", spec.name)
                tau = None

    def _settle(self, date: str, y: np.ndarray,
                decisions: dict[str, portfolio.TradeDecision | None]) -> None:
        for state in self._strategies:
            name = state.spec.name
            decision = decisions[name]
            if state.halted or decision is None:
                self.ledger.returns[name].append(math.nan)
                self.ledger.costs[name].append(math.nan)
                self.ledger.turnover[name].append(math.nan)
                self.ledger.values[name].append(state.value)
                continue
            try:
                net = portfolio.realized_step(decision.executed_weights, y,
                                              decision.cost)
                state.weights = portfolio.drift_weights(decision.executed_weights, y)
            except RuinError:
                state.halted = True
                self.ledger.ruin_events[name] = date
                self.diagnostics.warn("ruin", f"{name} on {date}")
                self.ledger.returns[name].append(math.nan)
                self.ledger.costs[name].append(decision.cost)
                self.ledger.turnover[name].append(decision.turnover)
                self.ledger.values[name].append(state.value)
                continue
            state.value *= math.exp(net)
            self.ledger.returns[name].append(net)
            self.ledger.costs[name].append(decision.cost)
            self.ledger.turnover[name].append(decision.turnover)
            self.ledger.values[name].append(state.value)

    # -- SGDLM path --------------------------------------------------------

    def _step_sgdlm(self, date: str, y: np.ndarray) -> None:
        cfg = self.config
        span = self._selection_cfg.warmup_span

        def evolve_one(j: int) -> NormalGammaBelief:
            part = self._partitions[j]
            g = selection.transition_diag(self._sets[j], part, span)
            spec = EvolutionSpec(cfg.delta_phi, cfg.delta_gamma, cfg.beta, g)
            try:
                return evolve(self._beliefs[j], spec, part)
            except NumericalError as exc:
                raise NumericalError(f"series {self.series_ids[j]}: {exc}") from exc

        priors = self._map(evolve_one, range(self.m))
        predictors = compute_predictor(self._error_history, cfg.predictor_form,
                                       self.m)
        model = engine.SgdlmModel(priors, self._partitions,
                                  [EvolutionSpec(cfg.delta_phi, cfg.delta_gamma,
                                                 cfg.beta)] * self.m)

        decoupled_exact = all(p.n_gamma == 0 for p in self._partitions) \
            and all(b.dof > 2.05 for b in priors)
        if decoupled_exact:
            p_t, variances, log_dens_fn, lo, hi = self._analytic_forecast(
                priors, predictors)
            cov = np.diag(variances)
        else:
            sample = engine.sample_prior(model, cfg.n_draws, cfg.seed,
                                         step=self.t, source_density=False)
            moments = engine.forecast_moments_from_sample(
                model, sample, predictors, diagnostics=self.diagnostics,
                full_covariance=bool(self._strategies))
            p_t, cov = moments.mean, moments.covariance
            if cfg.forecast_intervals:
                draws = engine.predictive_draws_from_sample(
                    model, sample,
                    rngmod.substream(cfg.seed, self.t, rngmod.PREDICTIVE),
                    predictors)
                lo, hi = np.quantile(draws, [0.05, 0.95], axis=0)
            else:
                lo = hi = np.full(self.m, math.nan)
            log_dens_fn = lambda obs: engine.predictive_log_density_from_sample(
                model, sample, obs, predictors)

        decisions = self._trade(p_t, cov)

        # Observation realized: conjugate updates with parent values in F.
        def update_one(j: int):
            part = self._partitions[j]
            f_vec = np.concatenate([predictors[j], y[list(part.parent_ids)]])
            try:
                return update(priors[j], f_vec, y[j], self.diagnostics)
            except NumericalError as exc:
                raise NumericalError(f"series {self.series_ids[j]}: {exc}") from exc

        updated = self._map(update_one, range(self.m))
        posteriors = [belief for belief, _ in updated]

        self._settle(date, y, decisions)
        log_density = float(log_dens_fn(y))
        errors = y - p_t
        self._error_history.append(errors)
        if len(self._error_history) > ERROR_WINDOW:
            del self._error_history[0]

        if decoupled_exact:
            ess = float(cfg.n_draws)
            entropy = raw = 0.0
            final_beliefs = posteriors
        else:
            post_model = engine.SgdlmModel(posteriors, self._partitions,
                                           model.evolution_specs)
            weighted = engine.recouple(
                post_model, cfg.n_draws, cfg.seed, step=self.t,
                ess_floor=cfg.ess_floor_fraction * cfg.n_draws,
                diagnostics=self.diagnostics)
            ess = weighted.ess
            if 1.0 - ess / cfg.n_draws < cfg.vb_skip_tolerance:
                # Coupling correction below Monte Carlo resolution: the
                # product of conjugate posteriors is the better estimate of
                # the reweighted posterior than a refit from draws.
                raw = engine.weight_entropy(weighted)
                entropy = max(0.0, raw)
                final_beliefs = posteriors
            else:
                result = engine.vb_decouple(weighted, self._partitions,
                                            prev_dofs=[b.dof for b in posteriors],
                                            diagnostics=self.diagnostics)
                entropy, raw = result.entropy, result.entropy_raw
                final_beliefs = result.beliefs

        core_fraction = math.nan
        if cfg.selection_enabled:
            final_beliefs, core_fraction = self._select(date, y, final_beliefs)
        self._beliefs = final_beliefs

        self.ledger.dates.append(date)
        self.ledger.forecast_mean.append(p_t)
        self.ledger.forecast_sd.append(np.sqrt(np.diag(cov)))
        self.ledger.interval_lo.append(lo)
        self.ledger.interval_hi.append(hi)
        self.ledger.abs_errors.append(np.abs(errors))
        self.ledger.log_density.append(log_density)
        self.ledger.ess.append(ess)
        self.ledger.entropy.append(entropy)
        self.ledger.entropy_raw.append(raw)
        self.ledger.core_change.append(core_fraction)

    def _analytic_forecast(self, priors, predictors):
        """Closed-form moments when no series has parents (coupling exact)."""
        m = self.m
        f = np.empty(m)
        q = np.empty(m)
        dofs = np.empty(m)
        for j, belief in enumerate(priors):
            x = predictors[j]
            f[j] = x @ belief.mean
            q[j] = belief.precision_scale + x @ belief.scale @ x
            dofs[j] = belief.dof
        variances = q * dofs / (dofs - 2.0)
        half = student_t.ppf(0.95, dofs) * np.sqrt(q)

        def log_dens(obs):
            z = (np.asarray(obs) - f) / np.sqrt(q)
            return float(np.sum(student_t.logpdf(z, dofs) - 0.5 * np.log(q)))

        return f, variances, log_dens, f - half, f + half

    def _select(self, date: str, y: np.ndarray,
                beliefs: list[NormalGammaBelief]
                ) -> tuple[list[NormalGammaBelief], float]:
        cfg = self.config
        self._proposal_belief = wdlm.wdlm_update(
            wdlm.wdlm_evolve(self._proposal_belief, cfg.proposal_delta,
                             cfg.proposal_beta),
            np.ones(1), y)
        omega = wdlm.precision_estimate(self._proposal_belief, self.diagnostics)

        changed = 0
        out: list[NormalGammaBelief] = []
        for j in range(self.m):
            result = selection.selection_step(
                self._sets[j], beliefs[j], self._partitions[j], omega[j],
                self._selection_cfg)
            if result.core_changed:
                changed += 1
            self._sets[j] = result.sets
            self._partitions[j] = result.partition
            out.append(result.belief)
            sid = self.series_ids[j]
            for k in sorted(result.sets.warm_up):
                self.ledger.membership.append((date, sid, self.series_ids[k],
                                               "warmup"))
            for k in sorted(result.sets.core):
                self.ledger.membership.append((date, sid, self.series_ids[k],
                                               "core"))
            for k in sorted(result.sets.phase_out):
                self.ledger.membership.append((date, sid, self.series_ids[k],
                                               "phaseout"))
        return out, changed / self.m

    # -- WDLM path ----------------------------------------------------------

    def _step_wdlm(self, date: str, y: np.ndarray) -> None:
        cfg = self.config
        prior = wdlm.wdlm_evolve(self._wdlm_belief, cfg.wdlm_delta, cfg.wdlm_beta)
        regressor = np.ones(1)
        f, scale, dof = wdlm.wdlm_forecast(prior, regressor)
        cov = wdlm.forecast_covariance(scale, dof)

        decisions = self._trade(f, cov)

        self._settle(date, y, decisions)
        log_density = float(multivariate_t.logpdf(y, loc=f, shape=scale, df=dof))
        errors = y - f
        self._error_history.append(errors)
        if len(self._error_history) > ERROR_WINDOW:
            del self._error_history[0]
        self._wdlm_belief = wdlm.wdlm_update(prior, regressor, y)

        half = student_t.ppf(0.95, dof) * np.sqrt(np.diag(scale))
        self.ledger.dates.append(date)
        self.ledger.forecast_mean.append(f)
        self.ledger.forecast_sd.append(np.sqrt(np.diag(cov)))
        self.ledger.interval_lo.append(f - half)
        self.ledger.interval_hi.append(f + half)
        self.ledger.abs_errors.append(np.abs(errors))
        self.ledger.log_density.append(log_density)
        self.ledger.ess.append(math.nan)
        self.ledger.entropy.append(math.nan)
        self.ledger.entropy_raw.append(math.nan)
        self.ledger.core_change.append(math.nan)


def run_filter(panel: ReturnsPanel, config: RunConfig) -> BacktestLedger:
    """Filter a whole panel and return the completed ledger."""
    runner = FilterRunner(config, panel.series_ids, panel.benchmark_index)
    try:
        for i, date in enumerate(panel.dates):
            runner.step(date, panel.log_returns[i])
    finally:
        runner.close()
    return runner.finish()


def metrics(ledger: BacktestLedger) -> dict:
    """Cumulative summaries recomputed from the per-day rows."""
    out: dict = {"n_days": ledger.n_days}
    out["log_likelihood"] = float(np.sum(ledger.log_density)) if ledger.n_days else 0.0
    if ledger.abs_errors:
        out["mad"] = float(np.mean(np.vstack(ledger.abs_errors)))
    else:
        out["mad"] = math.nan
    ess = np.array(ledger.ess, dtype=float)
    finite = ess[np.isfinite(ess)]
    out["ess_min"] = float(finite.min()) if finite.size else math.nan
    out["ess_mean"] = float(finite.mean()) if finite.size else math.nan
    entropy = np.array(ledger.entropy, dtype=float)
    finite_entropy = entropy[np.isfinite(entropy)]
    out["entropy_mean"] = (float(finite_entropy.mean())
                           if finite_entropy.size else math.nan)

    strategies: dict[str, dict] = {}
    for name in ledger.strategy_names:
        daily = np.array(ledger.returns[name], dtype=float)
        live = daily[np.isfinite(daily)]
        ann_return = (TRADING_DAYS_PER_YEAR * float(live.mean())
                      if live.size else math.nan)
        if live.size >= 2:
            ann_vol = math.sqrt(TRADING_DAYS_PER_YEAR) * float(np.std(live, ddof=1))
        else:
            ann_vol = 0.0
        if ann_vol > 0.0:
            sharpe = ann_return / ann_vol
        else:
            sharpe = math.inf if live.size else math.nan
        strategies[name] = {
            "ann_return": ann_return,
            "ann_vol": ann_vol,
            "sharpe": sharpe,
            "final_value": (ledger.values[name][-1] if ledger.values[name]
                            else math.nan),
            "total_cost": (float(np.nansum(ledger.costs[name]))
                           if ledger.costs[name] else 0.0),
            "ruined_on": ledger.ruin_events.get(name),
        }
    out["strategies"] = strategies
    return out


# -- export ---------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def export(ledger: BacktestLedger, out_dir) -> list[Path]:
    """Write the ledger to deterministic CSV files plus a run report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = ledger.summary or metrics(ledger)
    names = ledger.strategy_names
    written: list[Path] = []

    path = out / "metrics.csv"
    rows = [["start_value", "", _fmt(ledger.start_value)]]
    for key in ("n_days", "log_likelihood", "mad", "ess_min", "ess_mean",
                "entropy_mean"):
        rows.append([key, "", _fmt(summary[key])])
    for name in names:
        stats = summary["strategies"][name]
        for key in ("ann_return", "ann_vol", "sharpe", "final_value",
                    "total_cost"):
            rows.append([key, name, _fmt(stats[key])])
        if stats["ruined_on"] is not None:
            rows.append(["ruined_on", name, stats["ruined_on"]])
    _write_csv(path, ["metric", "strategy", "value"], rows)
    written.append(path)

    path = out / "portfolio_values.csv"
    rows = [[date] + [_fmt(ledger.values[name][i]) for name in names]
            for i, date in enumerate(ledger.dates)]
    _write_csv(path, ["date"] + names, rows)
    written.append(path)

    path = out / "entropy.csv"
    rows = [[date, _fmt(ledger.entropy[i]), _fmt(ledger.entropy_raw[i]),
             _fmt(ledger.ess[i])] for i, date in enumerate(ledger.dates)]
    _write_csv(path, ["date", "entropy", "entropy_raw", "ess"], rows)
    written.append(path)

    path = out / "parental_membership.csv"
    rows = [[date, sid, parent, state]
            for date, sid, parent, state in ledger.membership]
    _write_csv(path, ["time", "series", "parent", "state"], rows)
    written.append(path)

    path = out / "churn.csv"
    rows = [[date, _fmt(ledger.core_change[i])]
            for i, date in enumerate(ledger.dates)]
    _write_csv(path, ["date", "core_change_fraction"], rows)
    written.append(path)

    path = out / "run_report.txt"
    lines = [f"days: {ledger.n_days}",
             f"series: {len(ledger.series_ids)}",
             f"strategies: {','.join(names)}"]
    for name, date in sorted(ledger.ruin_events.items()):
        lines.append(f"ruin: {name} on {date}")
    lines.extend(ledger.diagnostics.merged_report())
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    written.append(path)
    return written
