"""Simultaneous graphical dynamic linear models for sequential forecasting.

Decoupled conjugate filtering per series, importance-sampling recoupling of
the joint posterior, variational decoupling back to conjugate form, adaptive
selection of simultaneous parental sets, a Wishart-DLM benchmark, and a
portfolio backtest harness.
"""

from .backtest import (BacktestLedger, FilterRunner, compute_predictor, export,
                       metrics, run_filter)
from .config import (PRESETS, PriorConfig, RunConfig, StrategySpec,
                     load_config_file, parse_config_text, resolve_run_config,
                     synthetic_spec_from_mapping)
from .data import (ReturnsPanel, SyntheticSpec, SyntheticTruth, load_prices,
                   simulate, trading_dates, write_prices)
from .diagnostics import Diagnostics
from .dlm import (EvolutionSpec, NormalGammaBelief, StatePartition, UpdateStats,
                  evolve, ng_logpdf, ng_sample, update)
from .engine import (DecoupleResult, ForecastMoments, SgdlmModel, VBStats,
                     WeightedSample, build_gamma_matrix, effective_sample_size,
                     entropy_metric, forecast_moments, predictive_log_density,
                     recouple, sample_prior, solve_dof, vb_decouple)
from .errors import (ConfigError, ConstraintError, DataError, NumericalError,
                     RuinError, SgdlmError)
from .portfolio import (PortfolioProblem, TradeDecision, benchmark_neutral,
                        churn_adjust, drift_weights, min_variance,
                        realized_step, solve_equality_qp, target_return)
from .selection import (ParentalSets, SelectionConfig, phase_out_scale,
                        propose_candidates, restructure_belief, review,
                        selection_step, snr, transition_diag)
from .wdlm import (MatrixNIWBelief, forecast_covariance, precision_estimate,
                   wdlm_evolve, wdlm_forecast, wdlm_update)

__version__ = "0.1.0"
