"""TOML scenario files.

Schema (version 1)::

    schema_version = 1

    [cell]
    capacity_mbps = 50            # or capacity_bps

    [[class]]
    name = "static"
    arrival_rate = 0.1            # 1/s
    mean_volume_mbit = 100        # or mean_volume_bit
    volume_dist = "exponential"   # family name, or {family = "hyperexp2", scv = 4}

    [[class]]
    name = "mobile"
    arrival_rate = 0.1
    mean_volume_mbit = 100
    mobility_rate = 0.1           # 1/s; or speed_kmh + mean_distance_m
    sojourn_dist = "pareto2"

    [network]                     # optional
    topology = "ring(4)"          # or the explicit form below
    # capacities_mbps = [50, 50, 60]
    # arrival_rates = [[...], ...]     (per cell, per class)
    # mobility_rates = [[...], ...]
    # [network.routing]
    # mobile = [[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]]

    [sweep]                       # optional
    parameter = "rho_s"           # rho_s | rho0 | speed | theta | mobile_fraction
    values = [0.1, 0.2, 0.3]
    engines = ["markov", "qs"]
    mobile_fraction = 0.5
    mean_distance_m = 50          # speed sweeps; speeds in km/h

    [sim]                         # optional
    runs = 10
    events_per_run = 100000
    seed = 1

Distribution means are never written: volume laws take the class mean
volume, sojourn laws take ``1 / mobility_rate``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import tomli

from .errors import ConfigError
from .model import MBIT, CellScenario, Distribution, TrafficClass, kmh, mobility_rate_from_speed
from .network import NetworkTopology, parse_ring

SCHEMA_VERSION = 1
SWEEP_PARAMETERS = ("rho_s", "rho0", "speed", "theta", "mobile_fraction")
ENGINES = ("markov", "qs", "sim", "network-sim", "fixed-point")


def split_engine(engine: str, fixed_point_engine: str = "markov") -> tuple[str, str]:
    """``"fixed-point:qs"`` -> ``("fixed-point", "qs")``; other names have no inner engine."""
    base, _, inner = engine.partition(":")
    if base not in ENGINES:
        raise ConfigError(f"unknown engine {engine!r}; choose from {ENGINES}")
    if base != "fixed-point":
        if inner:
            raise ConfigError(f"engine {base!r} takes no inner engine")
        return base, ""
    inner = inner or fixed_point_engine
    if inner not in ("markov", "qs"):
        raise ConfigError(f"fixed-point inner engine must be 'markov' or 'qs', got {inner!r}")
    return base, inner


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple[float, ...]
    engines: tuple[str, ...] = ("markov",)
    mobile_fraction: float = 0.5
    mean_distance_m: float | None = None
    fixed_point_engine: str = "markov"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "engines", tuple(self.engines))
        if self.mean_distance_m is not None:
            object.__setattr__(self, "mean_distance_m", float(self.mean_distance_m))
        object.__setattr__(self, "mobile_fraction", float(self.mobile_fraction))
        if self.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"unknown sweep parameter {self.parameter!r}; choose from {SWEEP_PARAMETERS}")
        if not self.values:
            raise ConfigError("sweep grid is empty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError("sweep grid must be strictly increasing")
        if not all(math.isfinite(v) for v in self.values):
            raise ConfigError("sweep grid values must be finite")
        if not self.engines:
            raise ConfigError("no engines given")
        for e in self.engines:
            split_engine(e)
        if not 0 <= self.mobile_fraction <= 1:
            raise ConfigError("mobile_fraction must lie in [0, 1]")
        if self.parameter == "speed" and not (self.mean_distance_m and self.mean_distance_m > 0):
            raise ConfigError("speed sweeps need a positive mean_distance_m")
        if self.fixed_point_engine not in ("markov", "qs"):
            raise ConfigError("fixed_point_engine must be 'markov' or 'qs'")


@dataclass(frozen=True)
class SimSettings:
    runs: int = 10
    events_per_run: int = 100_000
    seed: int | None = None

    def __post_init__(self):
        if self.runs < 2:
            raise ConfigError("sim.runs must be >= 2")
        if self.events_per_run < 10:
            raise ConfigError("sim.events_per_run must be >= 10")


@dataclass(frozen=True)
class Config:
    cell: CellScenario
    topology: NetworkTopology | None = None
    sweep: SweepSpec | None = None
    sim: SimSettings = field(default_factory=SimSettings)
    ring_size: int | None = None


# --- parsing -----------------------------------------------------------------

def _number(table: Mapping, key: str, where: str, default=None) -> float:
    if key not in table:
        if default is None:
            raise ConfigError(f"{where}: missing {key!r}")
        return default
    v = table[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: {key!r} must be a number, got {v!r}")
    return float(v)


def _scaled(table: Mapping, base: str, scaled: str, factor: float, where: str) -> float:
    if (base in table) == (scaled in table):
        raise ConfigError(f"{where}: give exactly one of {base!r} or {scaled!r}")
    if base in table:
        return _number(table, base, where)
    return _number(table, scaled, where) * factor


def _distribution(spec: Any, mean: float, where: str) -> Distribution:
    if isinstance(spec, str):
        return Distribution(spec, mean)
    if isinstance(spec, Mapping):
        unknown = set(spec) - {"family", "scv"}
        if unknown or "family" not in spec:
            raise ConfigError(f"{where}: a distribution table needs 'family' and optionally 'scv'")
        scv = spec.get("scv")
        return Distribution(spec["family"], mean, None if scv is None else float(scv))
    raise ConfigError(f"{where}: distribution must be a family name or a table")


def _traffic_class(t: Mapping, i: int) -> TrafficClass:
    where = f"class #{i + 1}"
    if not isinstance(t.get("name"), str) or not t["name"]:
        raise ConfigError(f"{where}: missing 'name'")
    where = f"class {t['name']!r}"
    known = {"name", "kind", "arrival_rate", "mean_volume_bit", "mean_volume_mbit", "mobility_rate",
             "speed_kmh", "mean_distance_m", "volume_dist", "sojourn_dist"}
    unknown = set(t) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    volume = _scaled(t, "mean_volume_bit", "mean_volume_mbit", MBIT, where)
    if "speed_kmh" in t or "mean_distance_m" in t:
        if "mobility_rate" in t:
            raise ConfigError(f"{where}: give mobility_rate or speed_kmh + mean_distance_m, not both")
        theta = mobility_rate_from_speed(kmh(_number(t, "speed_kmh", where)), _number(t, "mean_distance_m", where))
    else:
        theta = _number(t, "mobility_rate", where, 0.0)
    kind = t.get("kind")
    if kind not in (None, "static", "mobile"):
        raise ConfigError(f"{where}: kind must be 'static' or 'mobile'")
    if kind == "static" and theta > 0:
        raise ConfigError(f"{where}: declared static but has a positive mobility rate")
    if kind == "mobile" and theta == 0:
        raise ConfigError(f"{where}: declared mobile but has zero mobility rate")
    vol = _distribution(t.get("volume_dist", "exponential"), volume, f"{where} volume_dist")
    soj = None
    if theta > 0:
        soj = _distribution(t.get("sojourn_dist", "exponential"), 1.0 / theta, f"{where} sojourn_dist")
    elif "sojourn_dist" in t:
        raise ConfigError(f"{where}: sojourn_dist given for a static class")
    return TrafficClass(t["name"], _number(t, "arrival_rate", where), volume, theta, vol, soj)


def _matrix(value: Any, shape: tuple[int, int], where: str) -> np.ndarray:
    try:
        m = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: not a numeric matrix") from None
    if m.shape != shape:
        raise ConfigError(f"{where}: expected shape {shape}, got {m.shape}")
    return m


def _network(t: Mapping, base: CellScenario) -> tuple[NetworkTopology, int | None]:
    known = {"topology", "capacities_bps", "capacities_mbps", "arrival_rates", "mobility_rates", "routing"}
    unknown = set(t) - known
    if unknown:
        raise ConfigError(f"network: unknown keys {sorted(unknown)}")
    if "topology" in t:
        if set(t) - {"topology"}:
            raise ConfigError("network: 'topology' shorthand excludes the explicit keys")
        n = parse_ring(str(t["topology"]))
        if n is None:
            raise ConfigError(f"network: unknown topology {t['topology']!r}")
        return NetworkTopology.ring(base, n), n
    if ("capacities_bps" in t) == ("capacities_mbps" in t):
        raise ConfigError("network: give exactly one of 'capacities_bps' or 'capacities_mbps'")
    caps = np.array(t.get("capacities_bps", t.get("capacities_mbps")), dtype=float)
    if "capacities_mbps" in t:
        caps = caps * MBIT
    if caps.ndim != 1 or caps.size == 0:
        raise ConfigError("network: capacities must be a non-empty list")
    n, K = caps.size, base.n_classes
    lam = _matrix(t["arrival_rates"], (n, K), "network.arrival_rates") if "arrival_rates" in t \
        else np.tile(base.arrival_rates, (n, 1))
    theta = _matrix(t["mobility_rates"], (n, K), "network.mobility_rates") if "mobility_rates" in t \
        else np.tile(base.mobility_rates, (n, 1))
    cells = []
    for i in range(n):
        classes = []
        for k, c in enumerate(base.classes):
            c2 = c.with_arrival_rate(float(lam[i, k]))
            if theta[i, k] != c.mobility_rate:
                c2 = c2.with_mobility_rate(float(theta[i, k]))
            classes.append(c2)
        cells.append(CellScenario(float(caps[i]), tuple(classes)))
    routing = {}
    for name, mat in dict(t.get("routing", {})).items():
        routing[name] = _matrix(mat, (n, n), f"network.routing.{name}")
    return NetworkTopology(tuple(cells), routing), None


def parse_config(data: Mapping) -> Config:
    """Build a :class:`Config` from an already-parsed TOML document."""
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    unknown = set(data) - {"schema_version", "cell", "class", "network", "sweep", "sim"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if "cell" not in data:
        raise ConfigError("missing [cell] table")
    capacity = _scaled(data["cell"], "capacity_bps", "capacity_mbps", MBIT, "cell")
    raw = data.get("class", [])
    if not isinstance(raw, list) or not raw:
        raise ConfigError("at least one [[class]] is required")
    cell = CellScenario(capacity, tuple(_traffic_class(t, i) for i, t in enumerate(raw)))

    topology = ring = None
    if "network" in data:
        topology, ring = _network(data["network"], cell)

    sweep = None
    if "sweep" in data:
        s = dict(data["sweep"])
        unknown = set(s) - {"parameter", "values", "engines", "mobile_fraction", "mean_distance_m", "fixed_point_engine"}
        if unknown:
            raise ConfigError(f"sweep: unknown keys {sorted(unknown)}")
        if "parameter" not in s or "values" not in s:
            raise ConfigError("sweep: 'parameter' and 'values' are required")
        sweep = SweepSpec(**s)

    sim = SimSettings(**data.get("sim", {})) if "sim" in data else SimSettings()
    return Config(cell, topology, sweep, sim, ring)


def loads(text: str) -> Config:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return parse_config(data)


def load_config(path: str | Path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


# --- serialization -----------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            raise ConfigError(f"cannot serialize non-finite value {v}")
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_fmt(x)}" for k, x in v.items()) + " }"
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(x.item() if isinstance(x, np.generic) else x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _dist_value(d: Distribution) -> Any:
    if d.scv is None:
        return d.family.value
    return {"family": d.family.value, "scv": float(d.scv)}


def dumps(config: Config) -> str:
    """Serialize to TOML in base units; ``loads(dumps(c)) == c`` holds exactly."""
    out = [f"schema_version = {SCHEMA_VERSION}", "", "[cell]", f"capacity_bps = {_fmt(float(config.cell.capacity))}"]
    for c in config.cell.classes:
        out += ["", "[[class]]", f"name = {_fmt(c.name)}",
                f"arrival_rate = {_fmt(float(c.arrival_rate))}",
                f"mean_volume_bit = {_fmt(float(c.mean_volume))}",
                f"mobility_rate = {_fmt(float(c.mobility_rate))}",
                f"volume_dist = {_fmt(_dist_value(c.volume_dist))}"]
        if not c.is_static:
            out.append(f"sojourn_dist = {_fmt(_dist_value(c.sojourn_dist))}")
    topo = config.topology
    if topo is not None:
        out += ["", "[network]"]
        if config.ring_size is not None:
            out.append(f'topology = "ring({config.ring_size})"')
        else:
            out.append(f"capacities_bps = {_fmt([float(c.capacity) for c in topo.cells])}")
            out.append(f"arrival_rates = {_fmt([[float(x) for x in c.arrival_rates] for c in topo.cells])}")
            out.append(f"mobility_rates = {_fmt([[float(x) for x in c.mobility_rates] for c in topo.cells])}")
            if topo.routing:
                out += ["", "[network.routing]"]
                for name, mat in topo.routing.items():
                    out.append(f"{_fmt(name)} = {_fmt([[float(x) for x in row] for row in mat])}")
    s = config.sweep
    if s is not None:
        out += ["", "[sweep]", f"parameter = {_fmt(s.parameter)}", f"values = {_fmt(list(s.values))}",
                f"engines = {_fmt(list(s.engines))}", f"mobile_fraction = {_fmt(float(s.mobile_fraction))}",
                f"fixed_point_engine = {_fmt(s.fixed_point_engine)}"]
        if s.mean_distance_m is not None:
            out.append(f"mean_distance_m = {_fmt(float(s.mean_distance_m))}")
    out += ["", "[sim]", f"runs = {config.sim.runs}", f"events_per_run = {config.sim.events_per_run}"]
    if config.sim.seed is not None:
        out.append(f"seed = {config.sim.seed}")
    return "\n".join(out) + "\n"

