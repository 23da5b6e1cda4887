"""Returns panels: CSV ingestion and synthetic generation.

Prices arrive as a wide CSV (date column plus one column per ticker); the
first row supplies base prices and every later row yields one vector of
daily log-returns. The synthetic generator draws from the simultaneous
observation model with a known sparse coefficient matrix so that structure
recovery and calibration can be tested against ground truth.
"""

from __future__ import annotations

import csv
import datetime
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import DataError


@dataclass
class ReturnsPanel:
    dates: list[str]
    series_ids: list[str]
    log_returns: np.ndarray
    benchmark_index: int = 0

    def __post_init__(self):
        self.log_returns = np.asarray(self.log_returns, dtype=float)
        t, m = self.log_returns.shape
        if len(self.dates) != t:
            raise DataError(f"{len(self.dates)} dates for {t} return rows")
        if len(self.series_ids) != m:
            raise DataError(f"{len(self.series_ids)} ids for {m} columns")
        if not np.all(np.isfinite(self.log_returns)):
            raise DataError("log returns contain non-finite values")
        for i in range(1, t):
            if self.dates[i] <= self.dates[i - 1]:
                raise DataError(f"dates not strictly increasing at row {i}")
        if not 0 <= self.benchmark_index < m:
            raise DataError(f"benchmark index {self.benchmark_index} out of range")

    @property
    def n_steps(self) -> int:
        return self.log_returns.shape[0]

    @property
    def n_series(self) -> int:
        return self.log_returns.shape[1]


def load_prices(path, benchmark_index: int = 0) -> ReturnsPanel:
    """Read a wide prices CSV and convert to log-returns.

    The header holds the date column name followed by tickers; the first data
    row is consumed as base prices. Any missing or non-positive cell fails
    with its row/column coordinates.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a date column and at least one ticker")
        series_ids = header[1:]
        dates: list[str] = []
        prices: list[list[float]] = []
        for row_idx, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_idx} has {len(row)} cells, "
                                f"expected {len(header)}")
            date_str = row[0].strip()
            try:
                parsed_date = datetime.date.fromisoformat(date_str)
            except ValueError:
                raise DataError(f"{path}: row {row_idx} column 1: bad date "
                                f"{date_str!r}") from None
            if dates and parsed_date.isoformat() <= dates[-1]:
                raise DataError(f"{path}: row {row_idx} column 1: date "
                                f"{date_str} not after {dates[-1]}")
            values = []
            for col_idx, cell in enumerate(row[1:], start=2):
                cell = cell.strip()
                if not cell:
                    raise DataError(f"{path}: row {row_idx} column {col_idx}: "
                                    "missing value")
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {row_idx} column {col_idx}: "
                                    f"bad number {cell!r}") from None
                if not value > 0.0 or not np.isfinite(value):
                    raise DataError(f"{path}: row {row_idx} column {col_idx}: "
                                    f"non-positive price {cell}")
                values.append(value)
            dates.append(date_str)
            prices.append(values)

    if len(prices) < 2:
        raise DataError(f"{path}: need at least two price rows")
    array = np.asarray(prices)
    returns = np.log(array[1:] / array[:-1])
    return ReturnsPanel(dates[1:], series_ids, returns, benchmark_index)


def write_prices(path, panel: ReturnsPanel, base_price: float = 100.0,
                 base_date: str | None = None) -> None:
    """Inverse of `load_prices`: synthesize a wide prices CSV from returns."""
    prices = base_price * np.exp(np.cumsum(panel.log_returns, axis=0))
    first = base_date if base_date is not None else _previous_weekday(panel.dates[0])
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["date"] + list(panel.series_ids))
        writer.writerow([first] + [repr(float(base_price))] * panel.n_series)
        for i, date in enumerate(panel.dates):
            writer.writerow([date] + [repr(float(v)) for v in prices[i]])


def trading_dates(n: int, start: str = "2003-01-02") -> list[str]:
    """n consecutive weekdays from the start date."""
    day = datetime.date.fromisoformat(start)
    out: list[str] = []
    while len(out) < n:
        if day.weekday() < 5:
            out.append(day.isoformat())
        day += datetime.timedelta(days=1)
    return out


def _previous_weekday(date_str: str) -> str:
    day = datetime.date.fromisoformat(date_str) - datetime.timedelta(days=1)
    while day.weekday() >= 5:
        day -= datetime.timedelta(days=1)
    return day.isoformat()


@dataclass
class SyntheticSpec:
    """Ground-truth generator settings.

    A fixed sparse coefficient matrix is built over a random topological
    order (so the implied system is always invertible), volatilities follow
    a per-series log random walk, and levels are constant.
    """

    n_series: int
    n_steps: int
    parents_per_series: int = 3
    gamma_low: float = 0.3
    gamma_high: float = 0.6
    base_sd: float = 0.01
    log_vol_sd: float = 0.0
    level: float = 0.0
    seed: int = 0
    gamma: np.ndarray | None = None

    def __post_init__(self):
        if self.n_series < 1 or self.n_steps < 1:
            raise DataError("n_series and n_steps must be positive")
        if self.gamma is not None:
            g = np.asarray(self.gamma, dtype=float)
            if g.shape != (self.n_series, self.n_series):
                raise DataError("explicit gamma has wrong shape")
            if np.any(np.diag(g) != 0.0):
                raise DataError("gamma must have a zero diagonal")
            sign, logdet = np.linalg.slogdet(np.eye(self.n_series) - g)
            if sign == 0 or logdet < np.log(1e-10):
                raise DataError("I - gamma is singular for the given structure")
            self.gamma = g


@dataclass
class SyntheticTruth:
    gamma: np.ndarray
    parents: list[tuple[int, ...]]
    levels: np.ndarray
    sigmas: np.ndarray  # (n_steps, n_series) observation noise scales

    @property
    def edges(self) -> set[tuple[int, int]]:
        return {(j, k) for j, parents in enumerate(self.parents) for k in parents}


def _random_structure(spec: SyntheticSpec,
                      rng: np.random.Generator) -> np.ndarray:
    m = spec.n_series
    order = rng.permutation(m)
    rank = np.empty(m, dtype=int)
    rank[order] = np.arange(m)
    gamma = np.zeros((m, m))
    for j in range(m):
        later = [k for k in range(m) if rank[k] > rank[j]]
        if not later:
            continue
        count = min(spec.parents_per_series, len(later))
        parents = rng.choice(len(later), size=count, replace=False)
        for idx in parents:
            k = later[int(idx)]
            magnitude = rng.uniform(spec.gamma_low, spec.gamma_high)
            gamma[j, k] = magnitude * (1.0 if rng.random() < 0.5 else -1.0)
    return gamma


def simulate(spec: SyntheticSpec) -> tuple[ReturnsPanel, SyntheticTruth]:
    """Draw a panel from the simultaneous observation model with known truth."""
    rng = rngmod.substream(spec.seed, rngmod.SIMULATE)
    m, t = spec.n_series, spec.n_steps

    gamma = spec.gamma if spec.gamma is not None else _random_structure(spec, rng)
    parents = [tuple(int(k) for k in np.nonzero(gamma[j])[0]) for j in range(m)]

    levels = np.full(m, spec.level)
    base = spec.base_sd * np.exp(rng.uniform(-0.25, 0.25, size=m))
    steps = rng.normal(0.0, spec.log_vol_sd, size=(t, m))
    steps[0] = 0.0
    sigmas = np.exp(np.log(base) + np.cumsum(steps, axis=0))

    coupling = np.eye(m) - gamma
    noise = rng.standard_normal((t, m)) * sigmas
    returns = np.linalg.solve(coupling, (levels + noise).T).T

    panel = ReturnsPanel(trading_dates(t), [f"S{j:03d}" for j in range(m)], returns)
    return panel, SyntheticTruth(gamma, parents, levels, sigmas)
