"""Run configuration: dataclasses, embedded presets, flat key-value files.

Config files are plain text with one ``key = value`` pair per line and ``#``
comments. Keys are dotted (``model.kind``, ``selection.core_target``, ...);
unknown keys are rejected. Presets M1-M5, MA1-MA5, and W1-W5 encode the
standard discount grids for the two predictor forms and the benchmark model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import SyntheticSpec
from .errors import ConfigError
from .selection import SelectionConfig

MODEL_SGDLM = "sgdlm"
MODEL_WDLM = "wdlm"
PREDICTOR_LOCAL_LEVEL = "local_level"
PREDICTOR_LAGGED_ERROR = "lagged_error"

TRADING_DAYS_PER_YEAR = 252


@dataclass(frozen=True)
class PriorConfig:
    """Initial belief hyperparameters at daily log-return scale."""

    phi_var: float = 1e-2
    gamma_var: float = 0.25
    dof: float = 5.0
    scale: float = 1e-4


@dataclass(frozen=True)
class StrategySpec:
    """One portfolio rule evaluated by the harness."""

    name: str
    kind: str  # "passive" | "equal" | "optimize"
    tau: float | None = None
    neutral: bool = False
    churn: bool = True


STRATEGY_SPECS: dict[str, StrategySpec] = {
    "SPX": StrategySpec("SPX", "passive", churn=False),
    "P0": StrategySpec("P0", "equal", churn=False),
    "P1": StrategySpec("P1", "optimize"),
    "P2": StrategySpec("P2", "optimize", tau=0.10 / TRADING_DAYS_PER_YEAR),
    "P3": StrategySpec("P3", "optimize", tau=0.15 / TRADING_DAYS_PER_YEAR),
    "P4": StrategySpec("P4", "optimize", neutral=True),
    "P5": StrategySpec("P5", "optimize", tau=0.10 / TRADING_DAYS_PER_YEAR,
                       neutral=True),
    "P6": StrategySpec("P6", "optimize", tau=0.15 / TRADING_DAYS_PER_YEAR,
                       neutral=True),
}


@dataclass(frozen=True)
class RunConfig:
    model_kind: str = MODEL_SGDLM
    predictor_form: str = PREDICTOR_LOCAL_LEVEL
    beta: float = 0.95
    delta_phi: float = 0.995
    delta_gamma: float = 0.995
    wdlm_delta: float = 0.995
    wdlm_beta: float = 0.95
    proposal_delta: float = 0.95
    proposal_beta: float = 0.8
    selection_enabled: bool = True
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    n_draws: int = 5000
    seed: int = 0
    threads: int = 1
    cost_bp: float = 10.0
    start_value: float = 1000.0
    strategies: tuple[str, ...] = ("SPX", "P0", "P1", "P2", "P3", "P4", "P5", "P6")
    ess_floor_fraction: float = 0.01
    vb_skip_tolerance: float = 1e-3
    forecast_intervals: bool = True
    benchmark_eligible: bool = True
    initial_parents: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.model_kind not in (MODEL_SGDLM, MODEL_WDLM):
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.predictor_form not in (PREDICTOR_LOCAL_LEVEL, PREDICTOR_LAGGED_ERROR):
            raise ConfigError(f"unknown predictor form {self.predictor_form!r}")
        for name in self.strategies:
            if name not in STRATEGY_SPECS:
                raise ConfigError(f"unknown strategy {name!r}")
        if self.n_draws < 1 or self.threads < 1:
            raise ConfigError("n_draws and threads must be >= 1")

    @property
    def cost_rate(self) -> float:
        return self.cost_bp * 1e-4

    @property
    def n_phi(self) -> int:
        return 1 if self.predictor_form == PREDICTOR_LOCAL_LEVEL else 2

    def strategy_specs(self) -> list[StrategySpec]:
        return [STRATEGY_SPECS[name] for name in self.strategies]


def _sgdlm_preset(predictor: str, delta_gamma: float) -> dict[str, str]:
    return {"model.kind": MODEL_SGDLM, "model.predictor": predictor,
            "model.beta": "0.95", "model.delta_phi": "0.995",
            "model.delta_gamma": repr(delta_gamma)}


def _wdlm_preset(delta: float) -> dict[str, str]:
    return {"model.kind": MODEL_WDLM, "model.wdlm_delta": repr(delta),
            "model.wdlm_beta": "0.95"}


_DELTA_GRID = (0.995, 0.996, 0.997, 0.998, 0.999)

PRESETS: dict[str, dict[str, str]] = {}
for _i, _d in enumerate(_DELTA_GRID, start=1):
    PRESETS[f"M{_i}"] = _sgdlm_preset(PREDICTOR_LOCAL_LEVEL, _d)
    PRESETS[f"MA{_i}"] = _sgdlm_preset(PREDICTOR_LAGGED_ERROR, _d)
    PRESETS[f"W{_i}"] = _wdlm_preset(_d)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` lines into a mapping."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as handle:
            return parse_config_text(handle.read(), source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _parse_int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def run_config_from_mapping(mapping: dict[str, str],
                            base: RunConfig | None = None) -> RunConfig:
    """Apply dotted config keys on top of a base configuration."""
    cfg = base if base is not None else RunConfig()
    selection = cfg.selection
    prior = cfg.prior
    updates: dict[str, object] = {}

    for key, value in mapping.items():
        if key.startswith("sim."):
            continue  # synthetic-spec keys live in the same file
        match key:
            case "preset":
                pass  # handled by the caller before field keys
            case "model.kind":
                updates["model_kind"] = value
            case "model.predictor":
                updates["predictor_form"] = value
            case "model.beta":
                updates["beta"] = _parse_float(value, key)
            case "model.delta_phi":
                updates["delta_phi"] = _parse_float(value, key)
            case "model.delta_gamma":
                updates["delta_gamma"] = _parse_float(value, key)
            case "model.wdlm_delta":
                updates["wdlm_delta"] = _parse_float(value, key)
            case "model.wdlm_beta":
                updates["wdlm_beta"] = _parse_float(value, key)
            case "proposal.delta":
                updates["proposal_delta"] = _parse_float(value, key)
            case "proposal.beta":
                updates["proposal_beta"] = _parse_float(value, key)
            case "selection.enabled":
                updates["selection_enabled"] = _parse_bool(value, key)
            case "selection.core_target":
                selection = replace(selection, core_target=_parse_int(value, key))
            case "selection.warmup_span":
                selection = replace(selection, warmup_span=_parse_int(value, key))
            case "selection.n_max":
                selection = replace(selection, n_max=_parse_int(value, key))
            case "selection.new_parent_prior_var":
                selection = replace(selection,
                                    new_parent_prior_var=_parse_float(value, key))
            case "selection.benchmark_eligible":
                updates["benchmark_eligible"] = _parse_bool(value, key)
            case "prior.phi_var":
                prior = replace(prior, phi_var=_parse_float(value, key))
            case "prior.gamma_var":
                prior = replace(prior, gamma_var=_parse_float(value, key))
            case "prior.dof":
                prior = replace(prior, dof=_parse_float(value, key))
            case "prior.scale":
                prior = replace(prior, scale=_parse_float(value, key))
            case "run.n_draws":
                updates["n_draws"] = _parse_int(value, key)
            case "run.seed":
                updates["seed"] = _parse_int(value, key)
            case "run.threads":
                updates["threads"] = _parse_int(value, key)
            case "run.ess_floor_fraction":
                updates["ess_floor_fraction"] = _parse_float(value, key)
            case "run.vb_skip_tolerance":
                updates["vb_skip_tolerance"] = _parse_float(value, key)
            case "run.forecast_intervals":
                updates["forecast_intervals"] = _parse_bool(value, key)
            case "portfolio.cost_bp":
                updates["cost_bp"] = _parse_float(value, key)
            case "portfolio.start_value":
                updates["start_value"] = _parse_float(value, key)
            case "portfolio.strategies":
                names = tuple(tok.strip().rstrip("*") for tok in value.split(",")
                              if tok.strip())
                updates["strategies"] = names
            case _:
                raise ConfigError(f"unknown config key {key!r}")

    return replace(cfg, selection=selection, prior=prior, **updates)


def synthetic_spec_from_mapping(mapping: dict[str, str],
                                seed: int | None = None) -> SyntheticSpec:
    """Build a generator spec from ``sim.*`` keys (seed defaults to run.seed)."""
    kwargs: dict[str, object] = {}
    names = {"sim.n_series": ("n_series", _parse_int),
             "sim.n_steps": ("n_steps", _parse_int),
             "sim.parents_per_series": ("parents_per_series", _parse_int),
             "sim.gamma_low": ("gamma_low", _parse_float),
             "sim.gamma_high": ("gamma_high", _parse_float),
             "sim.base_sd": ("base_sd", _parse_float),
             "sim.log_vol_sd": ("log_vol_sd", _parse_float),
             "sim.level": ("level", _parse_float),
             "sim.seed": ("seed", _parse_int)}
    for key, value in mapping.items():
        if not key.startswith("sim."):
            continue
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parser = names[key]
        kwargs[attr] = parser(value, key)
    if "n_series" not in kwargs or "n_steps" not in kwargs:
        raise ConfigError("simulation needs sim.n_series and sim.n_steps")
    if seed is not None and "seed" not in kwargs:
        kwargs["seed"] = seed
    return SyntheticSpec(**kwargs)  # type: ignore[arg-type]


def resolve_run_config(mapping: dict[str, str], preset: str | None = None,
                       seed_override: int | None = None,
                       threads_override: int | None = None) -> RunConfig:
    """Preset first, then file keys, then command-line overrides."""
    cfg = RunConfig()
    preset_name = preset or mapping.get("preset")
    if preset_name:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}: choose from "
                              + ", ".join(sorted(PRESETS)))
        cfg = run_config_from_mapping(PRESETS[preset_name], cfg)
    cfg = run_config_from_mapping(mapping, cfg)
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override)
    if threads_override is not None:
        cfg = replace(cfg, threads=threads_override)
    return cfg
