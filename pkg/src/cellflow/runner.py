"""Engine dispatch for single points and parameter sweeps.

A *row* is a plain dict keyed by :data:`COLUMNS`; analytic engines leave the
confidence columns empty. Failures at a sweep point become a single row with
a non-``ok`` status so the sweep can continue.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import markov, network, qs, sim
from .config import Config, SweepSpec, split_engine
from .errors import CellflowError, ConfigError, InfeasibleError, NonConvergenceError, UnstableError
from .model import CellScenario, Kpis, kmh, mobility_rate_from_speed
from .network import NetworkTopology

log = logging.getLogger(__name__)

COLUMNS = ("sweep_value", "engine", "cell_id", "class", "E_N", "gamma", "H", "gamma_ratio",
           "ci_halfwidth", "status", "ci_E_N", "ci_H")
KPI_COLUMNS = ("E_N", "gamma", "H", "gamma_ratio")


# --- scenario transforms -----------------------------------------------------

def _pair(cell: CellScenario) -> tuple[int, int]:
    return cell.static_mobile_pair()


def _split_load(cell: CellScenario, rho_static: float, rho_mobile: float, s: int, m: int) -> CellScenario:
    rates = cell.arrival_rates.copy()
    rates[s] = rho_static * cell.capacity / cell.mean_volumes[s]
    rates[m] = rho_mobile * cell.capacity / cell.mean_volumes[m]
    return cell.with_arrival_rates(rates)


def apply_sweep(cell: CellScenario, spec: SweepSpec, value: float, pair: tuple[int, int] | None = None) -> CellScenario:
    """Cell with the swept parameter set to ``value``.

    Load sweeps split traffic between the static and the mobile class by
    ``spec.mobile_fraction`` (the share of mobile arrivals); ``rho_s`` fixes
    the static load, ``rho0`` the total fresh load. ``mobile_fraction`` sweeps
    keep the base cell's total load.
    """
    s, m = pair if pair is not None else _pair(cell)
    f = spec.mobile_fraction
    p = spec.parameter
    if p == "rho_s":
        if f >= 1:
            raise ConfigError("rho_s sweeps need mobile_fraction < 1")
        return _split_load(cell, value, value * f / (1 - f), s, m)
    if p == "rho0":
        return _split_load(cell, (1 - f) * value, f * value, s, m)
    if p == "mobile_fraction":
        if not 0 <= value <= 1:
            raise ConfigError("mobile_fraction values must lie in [0, 1]")
        total = cell.total_load
        return _split_load(cell, (1 - value) * total, value * total, s, m)
    theta = value if p == "theta" else mobility_rate_from_speed(kmh(value), spec.mean_distance_m)
    if theta < 0:
        raise ConfigError("mobility rate must be >= 0")
    classes = list(cell.classes)
    classes[m] = classes[m].with_mobility_rate(theta)
    return cell.with_classes(classes)


def swept_topology(config: Config, spec: SweepSpec, value: float, pair) -> NetworkTopology | None:
    topo = config.topology
    if topo is None:
        return None
    if config.ring_size is not None:
        return NetworkTopology.ring(apply_sweep(config.cell, spec, value, pair), config.ring_size)
    cells = tuple(apply_sweep(c, spec, value, pair) for c in topo.cells)
    return NetworkTopology(cells, dict(topo.routing))


# --- rows ----------------------------------------------------------------------

def _ratio(gamma: np.ndarray, cell: CellScenario) -> np.ndarray:
    mobile = np.array([not c.is_static for c in cell.classes])
    return sim.gamma_ratio(np.asarray(gamma, dtype=float), mobile)


def _kpi_rows(engine: str, cell_id: int, cell: CellScenario, kpis: Kpis) -> list[dict]:
    ratio = _ratio(kpis.throughput, cell)
    rows = []
    for k, name in enumerate(cell.names):
        rows.append({
            "engine": engine, "cell_id": cell_id, "class": name,
            "E_N": float(kpis.mean_occupancy[k]), "gamma": float(kpis.throughput[k]),
            "H": float(kpis.handover[k]), "gamma_ratio": None if math.isnan(ratio[k]) else float(ratio[k]),
            "ci_halfwidth": None, "ci_E_N": None, "ci_H": None, "status": "ok",
            "empty_probability": float(kpis.empty_probability),
        })
    return rows


def _sim_rows(engine: str, stats: sim.SimStats, names) -> list[dict]:
    rows = []
    n_cells = stats.mean["E_N"].shape[0]
    for i in range(n_cells):
        for k, name in enumerate(names):
            ratio = stats.mean["gamma_ratio"][i, k]
            rows.append({
                "engine": engine, "cell_id": i, "class": name,
                "E_N": float(stats.mean["E_N"][i, k]), "gamma": float(stats.mean["gamma"][i, k]),
                "H": float(stats.mean["H"][i, k]),
                "gamma_ratio": None if math.isnan(ratio) else float(ratio),
                "ci_halfwidth": float(stats.halfwidth["gamma"][i, k]),
                "ci_E_N": float(stats.halfwidth["E_N"][i, k]), "ci_H": float(stats.halfwidth["H"][i, k]),
                "status": "ok", "empty_probability": None,
            })
    return rows


@dataclass(frozen=True)
class SimOptions:
    runs: int = 10
    events_per_run: int = 100_000
    seed: int = 0


def point_seed(base: int, point: int, engine: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=base, spawn_key=(point, engine))


def evaluate(
    engine: str,
    cell: CellScenario,
    topology: NetworkTopology | None,
    ring_size: int | None,
    opts: SimOptions,
    seed: np.random.SeedSequence | int,
    fixed_point_engine: str = "markov",
) -> list[dict]:
    """Rows of one engine at one scenario; errors propagate."""
    base, inner = split_engine(engine, fixed_point_engine)
    if base == "markov":
        sol = markov.solve(cell)
        rows = _kpi_rows(engine, 0, cell, sol.kpis)
        for r in rows:
            r["diagnostics"] = sol.kpis.diagnostics
        return rows
    if base == "qs":
        kp = qs.qs_kpis(cell).kpis
        rows = _kpi_rows(engine, 0, cell, kp)
        for r in rows:
            r["diagnostics"] = kp.diagnostics
        return rows
    if base == "sim":
        stats = sim.replicate(sim.run_cell, cell, n_runs=opts.runs, seed=seed, events=opts.events_per_run)
        return _sim_rows(engine, stats, cell.names)
    if base == "network-sim":
        if topology is None:
            raise ConfigError("network-sim needs a [network] table")
        stats = sim.replicate(sim.run_network, topology, n_runs=opts.runs, seed=seed, events=opts.events_per_run)
        return _sim_rows(engine, stats, cell.names)
    # fixed point
    if topology is None or ring_size is not None:
        fp = network.solve_homogeneous(cell, engine=inner)
        rows = _kpi_rows(engine, 0, fp.scenarios[0], fp.kpis[0])
    else:
        fp = network.solve_heterogeneous(topology, engine=inner)
        rows = [r for i, (sc, kp) in enumerate(zip(fp.scenarios, fp.kpis)) for r in _kpi_rows(engine, i, sc, kp)]
    for r in rows:
        r["diagnostics"] = {"iterations": fp.iterations, "residual": fp.residual, "monotone": fp.monotone}
    return rows


def status_of(exc: Exception) -> str:
    if isinstance(exc, UnstableError):
        return f"unstable: {exc}"
    if isinstance(exc, InfeasibleError):
        return f"infeasible: {exc}"
    if isinstance(exc, NonConvergenceError):
        return f"nonconvergence: {exc}"
    return f"error: {exc}"


def _point(job) -> list[dict]:
    config, spec, opts, pair, index, value = job
    rows = []
    cell = apply_sweep(config.cell, spec, value, pair)
    topo = swept_topology(config, spec, value, pair)
    for e, engine in enumerate(spec.engines):
        try:
            got = evaluate(engine, cell, topo, config.ring_size, opts, point_seed(opts.seed, index, e), spec.fixed_point_engine)
        except ConfigError:
            raise  # a bad config is fatal, not a per-point status
        except CellflowError as exc:
            log.warning("sweep point %s, engine %s: %s", value, engine, exc)
            got = [{"engine": engine, "cell_id": None, "class": None, "status": status_of(exc)}]
        for r in got:
            r["sweep_value"] = value
        rows.extend(got)
    return rows


def run_sweep(config: Config, spec: SweepSpec, opts: SimOptions, workers: int = 1) -> list[dict]:
    """All rows of a sweep, in grid order then engine order."""
    pair = _pair(config.cell)
    jobs = [(config, spec, opts, pair, i, v) for i, v in enumerate(spec.values)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_point, jobs))
    else:
        chunks = [_point(j) for j in jobs]
    return [r for chunk in chunks for r in chunk]


# --- comparison ----------------------------------------------------------------

def compare(rows: list[dict], reference: str, gap_flag: float = 0.05) -> dict:
    """Per engine and KPI, the largest relative gap to ``reference`` over all rows.

    Simulation engines also report whether every gap lies within the
    simulation half-width. Gaps above ``gap_flag`` on analytic engines are
    listed under ``flagged``; they never fail the comparison.
    """
    ref = {}
    for r in rows:
        if r["engine"] == reference and r.get("status") == "ok":
            ref[(r["sweep_value"], r["cell_id"], r["class"])] = r
    report = {"reference": reference, "engines": {}, "flagged": []}
    engines = []
    for r in rows:
        if r["engine"] != reference and r["engine"] not in engines:
            engines.append(r["engine"])
    for engine in engines:
        out = {}
        within = True
        skipped = 0
        for kpi in KPI_COLUMNS:
            best = {"max_rel_gap": 0.0, "sweep_value": None, "cell_id": None, "class": None}
            for r in rows:
                if r["engine"] != engine or r.get("status") != "ok":
                    continue
                key = (r["sweep_value"], r["cell_id"], r["class"])
                base = ref.get(key) or ref.get((r["sweep_value"], 0, r["class"]))
                if base is None:
                    skipped += 1
                    continue
                a, b = r.get(kpi), base.get(kpi)
                if a is None or b is None or not (math.isfinite(a) and math.isfinite(b)):
                    continue
                gap = abs(a - b) / abs(b) if b != 0 else abs(a - b)
                if kpi != "gamma_ratio" and r.get("ci_halfwidth") is not None:
                    ci = {"E_N": r["ci_E_N"], "gamma": r["ci_halfwidth"], "H": r["ci_H"]}[kpi]
                    if abs(a - b) > ci:
                        within = False
                if gap > best["max_rel_gap"]:
                    best = {"max_rel_gap": gap, "sweep_value": r["sweep_value"], "cell_id": r["cell_id"],
                            "class": r["class"]}
            out[kpi] = best
            is_sim = split_engine(engine)[0] in ("sim", "network-sim")
            if not is_sim and best["max_rel_gap"] > gap_flag:
                report["flagged"].append({"engine": engine, "kpi": kpi, **best})
        if split_engine(engine)[0] in ("sim", "network-sim"):
            out["within_ci"] = within
            if not within:
                report["flagged"].append({"engine": engine, "kpi": "ci", "max_rel_gap": None})
        report["engines"][engine] = out
    return report
