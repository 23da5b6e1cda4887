"""Command-line entry point: simulate, backtest, and report workflows.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure. Errors print one machine-readable line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from .backtest import export, run_filter
from .config import (PRESETS, load_config_file, resolve_run_config,
                     synthetic_spec_from_mapping)
from .data import load_prices, simulate, write_prices
from .errors import ConfigError, DataError, NumericalError, SgdlmError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: usage: {message}\n")
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="sgdlm", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic prices CSV")
    sim.add_argument("--config", required=True, help="config file with sim.* keys")
    sim.add_argument("--out", required=True, help="output prices CSV path")
    sim.add_argument("--seed", type=int, default=None)

    bt = sub.add_parser("backtest", help="filter a prices CSV and export results")
    bt.add_argument("--config", default=None, help="config file")
    bt.add_argument("--preset", default=None,
                    help="model preset: " + ", ".join(sorted(PRESETS)))
    bt.add_argument("--prices", required=True, help="wide prices CSV")
    bt.add_argument("--out", required=True, help="output directory")
    bt.add_argument("--seed", type=int, default=None)
    bt.add_argument("--threads", type=int, default=None)

    rep = sub.add_parser("report", help="summarize an exported results directory")
    rep.add_argument("ledger_dir", help="directory written by `backtest`")
    return parser


def _cmd_simulate(args) -> int:
    mapping = load_config_file(args.config)
    seed = args.seed
    if seed is None:
        seed = int(mapping.get("sim.seed", mapping.get("run.seed", 0)))
    spec = synthetic_spec_from_mapping(mapping, seed=seed)
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    panel, truth = simulate(spec)
    write_prices(args.out, panel)
    truth_path = str(args.out) + ".truth.json"
    with open(truth_path, "w", encoding="utf-8") as handle:
        json.dump({"parents": [list(p) for p in truth.parents],
                   "gamma": [[float(v) for v in row] for row in truth.gamma],
                   "levels": [float(v) for v in truth.levels]},
                  handle, sort_keys=True, indent=1)
        handle.write("\n")
    print(f"wrote {panel.n_steps} days x {panel.n_series} series to {args.out}")
    return EXIT_OK


def _cmd_backtest(args) -> int:
    mapping = load_config_file(args.config) if args.config else {}
    config = resolve_run_config(mapping, preset=args.preset,
                                seed_override=args.seed,
                                threads_override=args.threads)
    panel = load_prices(args.prices)
    ledger = run_filter(panel, config)
    written = export(ledger, args.out)
    summary = ledger.summary
    print(f"filtered {ledger.n_days} days x {len(ledger.series_ids)} series; "
          f"log-likelihood {summary['log_likelihood']:.3f}, "
          f"MAD {summary['mad']:.4e}")
    for name in ledger.strategy_names:
        stats = summary["strategies"][name]
        print(f"  {name}: return {stats['ann_return']:+.4f} "
              f"vol {stats['ann_vol']:.4f} sharpe {stats['sharpe']:.3f} "
              f"value {stats['final_value']:.2f}")
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def _read_metrics(path: Path) -> dict:
    table: dict[tuple[str, str], str] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            table[(row["metric"], row["strategy"])] = row["value"]
    return table


def _cmd_report(args) -> int:
    directory = Path(args.ledger_dir)
    metrics_path = directory / "metrics.csv"
    values_path = directory / "portfolio_values.csv"
    if not metrics_path.is_file() or not values_path.is_file():
        raise DataError(f"{directory} does not contain backtest results")

    table = _read_metrics(metrics_path)
    with open(values_path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        names = header[1:]
        values = {name: [] for name in names}
        n_days = 0
        for row in reader:
            n_days += 1
            for name, cell in zip(names, row[1:]):
                values[name].append(float(cell) if cell else math.nan)

    print(f"results in {directory}: {n_days} days")
    for key in ("log_likelihood", "mad", "entropy_mean", "ess_min"):
        print(f"  {key}: {table.get((key, ''), '')}")
    start = float(table.get(("start_value", ""), "1000.0") or "1000.0")
    print(f"  {'strategy':>9} {'ann_return':>11} {'ann_vol':>9} {'sharpe':>8} "
          f"{'final':>10}  check")
    for name in names:
        series = [start] + values[name]
        rets = [math.log(series[i + 1] / series[i])
                for i in range(len(series) - 1)
                if series[i + 1] > 0 and series[i] > 0]
        mean = sum(rets) / len(rets) if rets else math.nan
        ann = 252 * mean
        stored = float(table.get(("ann_return", name), "nan") or "nan")
        ok = "ok" if (math.isfinite(ann) and math.isfinite(stored)
                      and abs(ann - stored) < 1e-8) else "differs"
        print(f"  {name:>9} {table.get(('ann_return', name), ''):>11} "
              f"{table.get(('ann_vol', name), ''):>9} "
              f"{table.get(('sharpe', name), ''):>8} "
              f"{table.get(('final_value', name), ''):>10}  {ok}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.verb == "simulate":
            return _cmd_simulate(args)
        if args.verb == "backtest":
            return _cmd_backtest(args)
        return _cmd_report(args)
    except (ConfigError, DataError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_DATA
    except NumericalError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_NUMERICAL
    except SgdlmError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
