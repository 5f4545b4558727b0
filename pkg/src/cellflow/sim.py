"""Flow-level discrete-event simulation of PS cells with mobile users.

Every cell shares its capacity equally among its active flows. Service is
tracked with a per-cell virtual clock ``V(t)`` that grows at rate ``C/L(t)``:
a flow entering with volume ``x`` finishes when ``V`` reaches ``V_entry + x``.
The next completion is recomputed from these finish tags after every state
change; only arrivals and sojourn expiries live in the event queue.

Ties at equal timestamps resolve completion < expiry < arrival, then by id.
"""

from __future__ import annotations

import heapq
import logging
import math
import warnings
from bisect import bisect_right
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .model import CellScenario, Distribution
from .network import NetworkTopology

log = logging.getLogger(__name__)

EXPIRY, ARRIVAL, HANDOVER_ARRIVAL = 1, 2, 3
WARMUP_FRACTION = 0.1
KPIS = ("E_N", "gamma", "H", "lambda_in", "gamma_ratio")


class PSCell:
    """Processor-sharing server with lazily deleted finish tags."""

    def __init__(self, capacity: float, n_classes: int):
        self.capacity = float(capacity)
        self.n_classes = n_classes
        self.t = 0.0
        self.vt = 0.0
        self.n = 0
        self.counts = [0] * n_classes
        self.heap: list[tuple[float, int]] = []
        self.flows: dict[int, tuple[float, int, float]] = {}  # fid -> (tag, class, entry volume)
        self.occ = [0.0] * n_classes
        self.served = [0.0] * n_classes
        self.busy = 0.0
        self.drained = 0.0

    def advance(self, t: float) -> None:
        dt = t - self.t
        if dt <= 0:
            return
        n = self.n
        if n:
            c = self.capacity
            self.vt += c * dt / n
            self.busy += dt
            counts = self.counts
            for k in range(self.n_classes):
                nk = counts[k]
                if nk:
                    self.occ[k] += nk * dt
                    self.served[k] += c * dt * nk / n
        self.t = t

    def add(self, fid: int, k: int, volume: float) -> None:
        tag = self.vt + volume
        self.flows[fid] = (tag, k, volume)
        heapq.heappush(self.heap, (tag, fid))
        self.counts[k] += 1
        self.n += 1

    def remaining(self, fid: int) -> float:
        return max(self.flows[fid][0] - self.vt, 0.0)

    def remove(self, fid: int) -> tuple[int, float]:
        """Take a flow out; returns its class and remaining volume."""
        tag, k, volume = self.flows.pop(fid)
        rem = max(tag - self.vt, 0.0)
        self.drained += volume - rem
        self.counts[k] -= 1
        self.n -= 1
        return k, rem

    def next_completion(self) -> tuple[float, int]:
        heap = self.heap
        flows = self.flows
        while heap and heap[0][1] not in flows:
            heapq.heappop(heap)
        if not heap:
            return math.inf, -1
        tag, fid = heap[0]
        return self.t + max(tag - self.vt, 0.0) * self.n / self.capacity, fid

    def in_service_drained(self) -> float:
        vt = self.vt
        return sum(vol - max(tag - vt, 0.0) for tag, _, vol in self.flows.values())


@dataclass
class CellRunStats:
    """Counters of one cell in one run.

    Window counters cover ``[warmup, horizon]``; ``total_*`` counters and the
    work-conservation fields cover the whole run.
    """

    names: tuple[str, ...]
    capacity: float
    measured_time: float
    arrivals: np.ndarray
    handover_arrivals: np.ndarray
    completions: np.ndarray
    handovers_out: np.ndarray
    occupancy_integral: np.ndarray
    carried_volume: np.ndarray
    total_arrivals: np.ndarray
    total_completions: np.ndarray
    total_handovers: np.ndarray
    in_flight: np.ndarray
    busy_time: float
    drained_volume: float
    mobile_mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def mean_occupancy(self) -> np.ndarray:
        return self.occupancy_integral / self.measured_time

    @property
    def throughput(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.occupancy_integral > 0, self.carried_volume / self.occupancy_integral, np.nan)

    @property
    def handover(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.arrivals > 0, self.handovers_out / self.arrivals, np.nan)

    @property
    def lambda_in(self) -> np.ndarray:
        return self.handover_arrivals / self.measured_time

    def kpi(self, name: str) -> np.ndarray:
        if name == "E_N":
            return self.mean_occupancy
        if name == "gamma":
            return self.throughput
        if name == "H":
            return self.handover
        if name == "lambda_in":
            return self.lambda_in
        if name == "gamma_ratio":
            return gamma_ratio(self.throughput, self.mobile_mask)
        raise KeyError(name)


def gamma_ratio(gamma: np.ndarray, mobile: np.ndarray) -> np.ndarray:
    """Mobile-to-static throughput ratio (first mobile over first static class)."""
    out = np.full(len(gamma), np.nan)
    if mobile is None or mobile.all() or not mobile.any():
        return out
    s = int(np.flatnonzero(~mobile)[0])
    m = int(np.flatnonzero(mobile)[0])
    out[m] = gamma[m] / gamma[s]
    return out


@dataclass
class RunStats:
    cells: list[CellRunStats]
    events: int
    horizon: float
    warmup: float

    def kpi(self, name: str) -> np.ndarray:
        """``(cells, classes)`` array of one KPI."""
        return np.array([c.kpi(name) for c in self.cells])


@dataclass
class SimStats:
    """Replication aggregate: mean and two-standard-deviation half-width per KPI."""

    runs: list[RunStats]
    mean: dict[str, np.ndarray]
    halfwidth: dict[str, np.ndarray]
    names: tuple[str, ...]

    @classmethod
    def from_runs(cls, runs: Sequence[RunStats]) -> SimStats:
        runs = list(runs)
        mean, hw = {}, {}
        for name in KPIS:
            vals = np.array([r.kpi(name) for r in runs])  # (runs, cells, classes)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices (e.g. H of static classes)
                mean[name] = np.nanmean(vals, axis=0) if np.isfinite(vals).any() else np.full(vals.shape[1:], np.nan)
                sd = np.nanstd(vals, axis=0, ddof=1) if len(runs) > 1 else np.full(vals.shape[1:], np.nan)
            hw[name] = 2.0 * sd
        return cls(runs, mean, hw, runs[0].cells[0].names)

    def estimate(self, kpi: str, cls: str | int, cell: int = 0) -> tuple[float, float]:
        k = self.names.index(cls) if isinstance(cls, str) else cls
        return float(self.mean[kpi][cell, k]), float(self.halfwidth[kpi][cell, k])

    def contains(self, kpi: str, cls: str | int, value: float, cell: int = 0) -> bool:
        m, h = self.estimate(kpi, cls, cell)
        return abs(value - m) <= h


def _exp_sampler(rng: np.random.Generator, rate: float, block: int = 4096) -> Callable[[], float]:
    return Distribution.exponential(1.0 / rate).sampler(rng, block)


def _uniform_sampler(rng: np.random.Generator, block: int = 4096) -> Callable[[], float]:
    buf: list[float] = []

    def draw() -> float:
        if not buf:
            buf.extend(rng.random(block)[::-1].tolist())
        return buf.pop()

    return draw


def _seed_sequence(seed) -> np.random.SeedSequence:
    """Fresh SeedSequence; copies an existing one since spawning mutates it."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def _simulate(
    cells: Sequence[CellScenario],
    routing: Sequence[np.ndarray] | None,
    seed,
    horizon: float | None,
    events: int | None,
    warmup_fraction: float,
    lambda_in: np.ndarray | None = None,
    volume_laws: Sequence[Distribution] | None = None,
) -> RunStats:
    """Core event loop shared by the single-cell and network runs.

    ``routing[k][j]`` holds cumulative routing probabilities out of cell ``j``
    for class ``k``; ``None`` means departing mobiles leave the system.
    ``lambda_in`` adds exogenous Poisson handover arrivals per cell and class.
    """
    if (horizon is None) == (events is None):
        raise ValueError("give exactly one of horizon or events")
    n_cells = len(cells)
    K = cells[0].n_classes
    ss = _seed_sequence(seed)
    streams = ss.spawn(4)
    arr_rngs = streams[0].spawn(2 * n_cells * K)
    vol_rng = np.random.Generator(np.random.PCG64(streams[1]))
    soj_rng = np.random.Generator(np.random.PCG64(streams[2]))
    route_rng = np.random.Generator(np.random.PCG64(streams[3]))

    classes = cells[0].classes
    mobile = [not c.is_static for c in classes]
    vol_draw = [c.volume_dist.sampler(vol_rng) for c in classes]
    soj_draw = [c.sojourn_dist.sampler(soj_rng) if m else None for c, m in zip(classes, mobile)]
    # per cell, class: sojourn samplers may differ when cells differ in mobility rate
    soj_cell = []
    for cell in cells:
        row = []
        for k, c in enumerate(cell.classes):
            if c.is_static:
                row.append(None)
            elif c.sojourn_dist == classes[k].sojourn_dist:
                row.append(soj_draw[k])
            else:
                row.append(c.sojourn_dist.sampler(soj_rng))
        soj_cell.append(row)
    uniform = _uniform_sampler(route_rng)

    ps = [PSCell(c.capacity, K) for c in cells]
    heap: list[tuple] = []
    inter = {}
    for i, cell in enumerate(cells):
        for k, c in enumerate(cell.classes):
            if c.arrival_rate > 0:
                draw = _exp_sampler(np.random.Generator(np.random.PCG64(arr_rngs[i * K + k])), c.arrival_rate)
                inter[(ARRIVAL, i, k)] = draw
                heapq.heappush(heap, (draw(), ARRIVAL, i * K + k, i, k))
            if lambda_in is not None and lambda_in[i, k] > 0:
                draw = _exp_sampler(np.random.Generator(np.random.PCG64(arr_rngs[n_cells * K + i * K + k])),
                                    float(lambda_in[i, k]))
                inter[(HANDOVER_ARRIVAL, i, k)] = draw
                heapq.heappush(heap, (draw(), HANDOVER_ARRIVAL, i * K + k, i, k))

    arrivals = np.zeros((n_cells, K), dtype=np.int64)
    ho_arrivals = np.zeros((n_cells, K), dtype=np.int64)
    completions = np.zeros((n_cells, K), dtype=np.int64)
    handovers = np.zeros((n_cells, K), dtype=np.int64)
    snap = None

    flow_cell: dict[int, int] = {}
    flow_token: dict[int, int] = {}
    next_fid = 0
    nc = [math.inf] * n_cells
    nc_fid = [-1] * n_cells
    count = 0
    warm_events = None if events is None else int(warmup_fraction * events)
    warm_time = None if horizon is None else warmup_fraction * horizon
    t = 0.0

    def take_snapshot(at):
        for c in ps:
            c.advance(at)
        return (
            at, arrivals.copy(), ho_arrivals.copy(), completions.copy(), handovers.copy(),
            [list(c.occ) for c in ps], [list(c.served) for c in ps],
        )

    def enter(i, k, fid, volume, handover):
        c = ps[i]
        c.add(fid, k, volume)
        arrivals[i, k] += 1
        if handover:
            ho_arrivals[i, k] += 1
        flow_cell[fid] = i
        s = soj_cell[i][k]
        if s is not None:
            tok = flow_token.get(fid, -1) + 1
            flow_token[fid] = tok
            heapq.heappush(heap, (c.t + s(), EXPIRY, fid, tok, k))
        nc[i], nc_fid[i] = c.next_completion()

    while True:
        tc = min(nc)
        te = heap[0][0] if heap else math.inf
        t_next = tc if tc <= te else te
        if horizon is not None:
            if snap is None and t_next >= warm_time:
                snap = take_snapshot(warm_time)
            if t_next > horizon:
                t = horizon
                break
        if t_next == math.inf:
            t = t_next
            break
        t = t_next
        if tc <= te:
            i = nc.index(tc)
            c = ps[i]
            c.advance(t)
            fid = nc_fid[i]
            k, _ = c.remove(fid)
            completions[i, k] += 1
            del flow_cell[fid]
            flow_token.pop(fid, None)
            nc[i], nc_fid[i] = c.next_completion()
        else:
            ev = heapq.heappop(heap)
            kind = ev[1]
            if kind == EXPIRY:
                fid, tok, k = ev[2], ev[3], ev[4]
                if flow_token.get(fid) != tok:
                    continue
                i = flow_cell[fid]
                c = ps[i]
                c.advance(t)
                _, rem = c.remove(fid)
                handovers[i, k] += 1
                nc[i], nc_fid[i] = c.next_completion()
                dest = -1
                if routing is not None:
                    cum = routing[k][i]
                    if cum[-1] > 0:
                        dest = min(bisect_right(cum, uniform() * cum[-1]), n_cells - 1)
                if dest >= 0 and rem > 0:
                    ps[dest].advance(t)
                    enter(dest, k, fid, rem, True)
                else:
                    del flow_cell[fid]
                    del flow_token[fid]
            else:
                i, k = ev[3], ev[4]
                heapq.heappush(heap, (t + inter[(kind, i, k)](), kind, ev[2], i, k))
                ps[i].advance(t)
                enter(i, k, next_fid, vol_draw[k](), kind == HANDOVER_ARRIVAL)
                next_fid += 1
        count += 1
        if events is not None:
            if count == warm_events:
                snap = take_snapshot(t)
            if count >= events:
                break

    if snap is None:
        snap = take_snapshot(0.0)
    for c in ps:
        c.advance(t)
    t0 = snap[0]
    window = t - t0
    if not window > 0:
        raise ConfigError("empty measurement window; increase the horizon or event count")

    total_arr = arrivals.copy()
    total_comp = completions.copy()
    total_ho = handovers.copy()
    out = []
    mob = np.array(mobile)
    for i, c in enumerate(ps):
        in_flight = np.array(c.counts, dtype=np.int64)
        out.append(CellRunStats(
            names=cells[i].names,
            capacity=c.capacity,
            measured_time=window,
            arrivals=arrivals[i] - snap[1][i],
            handover_arrivals=ho_arrivals[i] - snap[2][i],
            completions=completions[i] - snap[3][i],
            handovers_out=handovers[i] - snap[4][i],
            occupancy_integral=np.array(c.occ) - np.array(snap[5][i]),
            carried_volume=np.array(c.served) - np.array(snap[6][i]),
            total_arrivals=total_arr[i],
            total_completions=total_comp[i],
            total_handovers=total_ho[i],
            in_flight=in_flight,
            busy_time=c.busy,
            drained_volume=c.drained + c.in_service_drained(),
            mobile_mask=mob,
        ))
    return RunStats(out, count, t, t0)


def run_cell(
    scenario: CellScenario,
    horizon: float | None = None,
    seed=0,
    events: int | None = None,
    mode: str = "im",
    lambda_in: Sequence[float] | None = None,
    warmup_fraction: float = WARMUP_FRACTION,
) -> RunStats:
    """Simulate one cell.

    ``mode="im"``: departing mobiles are lost (impatience model).
    ``mode="open-network-cell"``: additionally feeds exogenous Poisson
    handover arrivals at rates ``lambda_in`` (counted separately); their
    volumes are drawn from the class volume law, which matches the residual
    volume only for exponential volumes.
    """
    if mode not in ("im", "open-network-cell"):
        raise ValueError(f"unknown mode {mode!r}")
    if scenario.static_load >= 1:
        log.warning("static load %.3g >= 1: the cell is unstable, statistics are transient", scenario.static_load)
    lin = None
    if mode == "open-network-cell":
        if lambda_in is None:
            raise ValueError("open-network-cell mode needs lambda_in")
        lin = np.asarray(lambda_in, dtype=float).reshape(1, -1)
        if lin.shape[1] != scenario.n_classes:
            raise ValueError("one handover rate per class expected")
    return _simulate([scenario], None, seed, horizon, events, warmup_fraction, lambda_in=lin)


def run_network(
    topology: NetworkTopology,
    horizon: float | None = None,
    seed=0,
    events: int | None = None,
    warmup_fraction: float = WARMUP_FRACTION,
) -> RunStats:
    """Simulate a multi-cell network where mobiles carry their residual volume.

    A mobile whose sojourn ends mid-transfer moves to a neighbour drawn from
    the routing row of its cell and starts a fresh sojourn there. Only
    exponential volumes and sojourns are accepted.
    """
    for cell in topology.cells:
        for c in cell.classes:
            if not c.is_exponential:
                raise ConfigError(f"network simulation needs exponential laws (class {c.name})")
    routing = []
    for k in range(len(topology.names)):
        p = topology.routing_matrix(k)
        routing.append([np.cumsum(row).tolist() for row in p])
    return _simulate(topology.cells, routing, seed, horizon, events, warmup_fraction)


def _call(job):
    fn, args, kwargs = job
    return fn(*args, **kwargs)


def replicate(
    run: Callable[..., RunStats],
    *args,
    n_runs: int = 10,
    seed: int | np.random.SeedSequence = 0,
    same_seed: bool = False,
    workers: int = 1,
    **kwargs,
) -> SimStats:
    """Run ``run(*args, seed=..., **kwargs)`` ``n_runs`` times and aggregate.

    Run seeds are spawned from ``seed`` with :class:`numpy.random.SeedSequence`;
    ``same_seed`` reuses the master seed for every run.
    """
    if n_runs < 2:
        raise ValueError("need at least two runs for a confidence interval")
    master = _seed_sequence(seed)
    seeds = [_seed_sequence(seed) for _ in range(n_runs)] if same_seed else master.spawn(n_runs)
    jobs = [(run, args, dict(kwargs, seed=s)) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_call, jobs))
    else:
        runs = [_call(j) for j in jobs]
    return SimStats.from_runs(runs)
