"""Command-line front-end.

Exit codes: 0 ok, 2 configuration error, 3 infeasible or unstable scenario,
4 fixed-point or solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from typing import Sequence

from . import runner, sim
from .config import Config, SweepSpec, load_config, split_engine
from .errors import ConfigError, InfeasibleError, NonConvergenceError, UnstableError

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONCONVERGENCE = 0, 2, 3, 4
SEED_ENV = "CELLFLOW_SEED"

SOLVE_COLUMNS = ("engine", "cell_id", "class", "E_N", "gamma", "H", "gamma_ratio", "empty_probability",
                 "gap_gamma", "gap_H", "ci_halfwidth", "ci_E_N", "ci_H", "diagnostics")
SIMULATE_COLUMNS = ("run", "cell_id", "class", "E_N", "gamma", "H", "gamma_ratio", "lambda_in",
                    "ci_E_N", "ci_gamma", "ci_H", "arrivals", "handover_arrivals", "completions", "handovers_out")


def fmt(value) -> str:
    """CSV cell text: 12 significant digits for floats, empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.12g}"
    if isinstance(value, dict):
        return ";".join(f"{k}={fmt(v)}" for k, v in value.items())
    if isinstance(value, (tuple, list)):
        return "x".join(fmt(v) for v in value)
    return str(value)


def write_rows(rows: Sequence[dict], columns: Sequence[str], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])


def _emit(rows, columns, out: str | None) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            write_rows(rows, columns, fh)
    else:
        write_rows(rows, columns, sys.stdout)


def resolve_seed(flag: int | None, config: Config) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return config.sim.seed if config.sim.seed is not None else 0


def _engines(args, default: Sequence[str]) -> tuple[str, ...]:
    if not args.engine:
        return tuple(default)
    names = tuple(e.strip() for group in args.engine for e in group.split(",") if e.strip())
    for e in names:
        split_engine(e)
    return names


def _sim_options(args, config: Config) -> runner.SimOptions:
    runs = args.runs if args.runs is not None else config.sim.runs
    events = args.events_per_run if args.events_per_run is not None else config.sim.events_per_run
    if runs < 2:
        raise ConfigError("--runs must be >= 2")
    if events < 10:
        raise ConfigError("--events-per-run must be >= 10")
    return runner.SimOptions(runs, events, resolve_seed(args.seed, config))


def _sweep_spec(config: Config, args) -> SweepSpec:
    if config.sweep is None:
        raise ConfigError("this command needs a [sweep] table")
    spec = config.sweep
    if args.engine:
        spec = SweepSpec(spec.parameter, spec.values, _engines(args, spec.engines), spec.mobile_fraction,
                         spec.mean_distance_m, spec.fixed_point_engine)
    return spec


# --- commands ------------------------------------------------------------------

def cmd_solve(args) -> int:
    config = load_config(args.config)
    engines = _engines(args, ("markov",))
    opts = _sim_options(args, config)
    rows = []
    for e, engine in enumerate(engines):
        rows.extend(runner.evaluate(engine, config.cell, config.topology, config.ring_size, opts,
                                    runner.point_seed(opts.seed, 0, e)))
    ref = {(r["cell_id"], r["class"]): r for r in rows if r["engine"] == "markov"}
    for r in rows:
        base = ref.get((r["cell_id"], r["class"]))
        if base is None or r["engine"] == "markov":
            continue
        for kpi in ("gamma", "H"):
            a, b = r[kpi], base[kpi]
            if math.isfinite(a) and math.isfinite(b) and b != 0:
                r[f"gap_{kpi}"] = (a - b) / b
    _print_table(rows)
    if args.out:
        _emit(rows, SOLVE_COLUMNS, args.out)
    return EXIT_OK


def _print_table(rows) -> None:
    print(f"{'engine':<18}{'cell':>5} {'class':<10}{'E_N':>14}{'gamma':>16}{'H':>14}{'P(empty)':>14}")
    for r in rows:
        p0 = r.get("empty_probability")
        print(f"{r['engine']:<18}{r['cell_id']:>5} {r['class']:<10}{r['E_N']:>14.6g}{r['gamma']:>16.6g}"
              f"{r['H']:>14.6g}{'' if p0 is None else format(p0, '.6g'):>14}")
        diag = r.get("diagnostics")
        if diag:
            print(f"{'':<18}  {fmt(diag)}")


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    spec = _sweep_spec(config, args)
    rows = runner.run_sweep(config, spec, _sim_options(args, config), workers=args.workers)
    _emit(rows, runner.COLUMNS, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    config = load_config(args.config)
    spec = _sweep_spec(config, args)
    if len(spec.engines) < 2:
        raise ConfigError("compare needs at least two engines")
    rows = runner.run_sweep(config, spec, _sim_options(args, config), workers=args.workers)
    report = runner.compare(rows, spec.engines[0], gap_flag=args.flag_gap)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    opts = _sim_options(args, config)
    if config.topology is not None and config.topology.n_cells > 1:
        stats = sim.replicate(sim.run_network, config.topology, n_runs=opts.runs, seed=opts.seed,
                              events=opts.events_per_run, workers=args.workers)
    else:
        stats = sim.replicate(sim.run_cell, config.cell, n_runs=opts.runs, seed=opts.seed,
                              events=opts.events_per_run, workers=args.workers)
    rows = []
    names = config.cell.names
    for j, run in enumerate(stats.runs):
        for i, c in enumerate(run.cells):
            for k, name in enumerate(names):
                rows.append({
                    "run": j, "cell_id": i, "class": name,
                    **{kpi: float(c.kpi(kpi)[k]) for kpi in ("E_N", "gamma", "H", "gamma_ratio")},
                    "lambda_in": float(c.lambda_in[k]),
                    "arrivals": int(c.arrivals[k]), "handover_arrivals": int(c.handover_arrivals[k]),
                    "completions": int(c.completions[k]), "handovers_out": int(c.handovers_out[k]),
                })
    n_cells = stats.mean["E_N"].shape[0]
    for i in range(n_cells):
        for k, name in enumerate(names):
            rows.append({
                "run": "mean", "cell_id": i, "class": name,
                **{kpi: float(stats.mean[kpi][i, k]) for kpi in ("E_N", "gamma", "H", "gamma_ratio", "lambda_in")},
                "ci_E_N": float(stats.halfwidth["E_N"][i, k]), "ci_gamma": float(stats.halfwidth["gamma"][i, k]),
                "ci_H": float(stats.halfwidth["H"][i, k]),
            })
    _emit(rows, SIMULATE_COLUMNS, args.out)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellflow", description="Flow-level performance of cells with mobile users.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("config", help="TOML scenario file")
        p.add_argument("--engine", action="append",
                       help="engine(s): markov, qs, sim, network-sim, fixed-point[:markov|:qs]; repeat or comma-separate")
        p.add_argument("--seed", type=int, default=None, help=f"master seed (falls back to ${SEED_ENV})")
        p.add_argument("--out", default=None, help="write output to this file instead of stdout")
        p.add_argument("--runs", type=int, default=None, help="simulation replications")
        p.add_argument("--events-per-run", type=int, default=None, help="simulation events per replication")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="worker processes")

    p = sub.add_parser("solve", help="KPIs of one scenario")
    common(p, workers=False)
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("sweep", help="KPIs over the [sweep] grid, as CSV")
    common(p)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("compare", help="largest relative gaps between engines, as JSON")
    common(p)
    p.add_argument("--flag-gap", type=float, default=0.05, help="relative gap above which analytic engines are flagged")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("simulate", help="per-run and aggregate simulation statistics, as CSV")
    common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnstableError, InfeasibleError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NonConvergenceError as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
