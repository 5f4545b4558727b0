"""Fixed-point coupling of cells through handover traffic.

Each cell turns its total arrival rates ``lambda0 + lambda_in`` into outgoing
handover rates ``lambda_out_k = theta_k E(N_k)`` (the *performance
function*). A network is at equilibrium when every cell's incoming handover
rate equals the routed sum of its neighbours' outgoing rates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import markov, qs
from .errors import ConfigError, InfeasibleError, NonConvergenceError, UnstableError
from .model import CellScenario, Kpis

log = logging.getLogger(__name__)

ENGINES = ("markov", "qs")
RATE_EPS = 1e-12
ROUTING_TOL = 1e-12


@dataclass(frozen=True)
class NetworkTopology:
    """Cells with their fresh traffic and per-class routing matrices.

    ``routing[name][j, i]`` is the probability that a class ``name`` user
    leaving cell ``j`` enters cell ``i``. Rows sum to 1, or to 0 for a cell
    whose departing users leave the network. Classes that are static in
    every cell need no routing.
    """

    cells: tuple[CellScenario, ...]
    routing: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.cells:
            raise ConfigError("a network needs at least one cell")
        names = self.cells[0].names
        if any(c.names != names for c in self.cells):
            raise ConfigError("every cell must carry the same classes in the same order")
        n = len(self.cells)
        routing = {}
        for name, mat in self.routing.items():
            if name not in names:
                raise ConfigError(f"routing given for unknown class {name!r}")
            p = np.array(mat, dtype=float)
            if p.shape != (n, n):
                raise ConfigError(f"routing for {name!r} must be {n}x{n}, got {p.shape}")
            if np.any(p < 0):
                raise ConfigError(f"routing for {name!r} has negative entries")
            if np.any(np.diag(p) != 0):
                raise ConfigError(f"routing for {name!r}: self-routing p(i,i) must be 0")
            rows = p.sum(axis=1)
            bad = (np.abs(rows - 1) > ROUTING_TOL) & (np.abs(rows) > ROUTING_TOL)
            if np.any(bad):
                raise ConfigError(f"routing for {name!r}: rows must sum to 1 (or 0), got {rows}")
            p.setflags(write=False)
            routing[name] = p
        for k, name in enumerate(names):
            mobile = any(c.classes[k].mobility_rate > 0 for c in self.cells)
            if mobile and name not in routing:
                if n == 1:
                    routing[name] = np.zeros((1, 1))
                else:
                    raise ConfigError(f"mobile class {name!r} has no routing")
        object.__setattr__(self, "routing", routing)

    @classmethod
    def ring(cls, cell: CellScenario, n_cells: int) -> NetworkTopology:
        """``n_cells`` identical cells on a ring, half the handovers to each neighbour."""
        return cls((cell,) * n_cells, {c.name: ring_routing(n_cells) for c in cell.classes if not c.is_static})

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def names(self) -> tuple[str, ...]:
        return self.cells[0].names

    def routing_matrix(self, k: int) -> np.ndarray:
        name = self.names[k]
        return self.routing.get(name, np.zeros((self.n_cells, self.n_cells)))

    def neighbours(self, cell: int, k: int) -> tuple[np.ndarray, np.ndarray]:
        row = self.routing_matrix(k)[cell]
        nz = np.flatnonzero(row)
        return nz, row[nz]


def ring_routing(n: int) -> np.ndarray:
    p = np.zeros((n, n))
    if n == 1:
        return p
    if n == 2:
        return np.array([[0.0, 1.0], [1.0, 0.0]])
    for j in range(n):
        p[j, (j - 1) % n] += 0.5
        p[j, (j + 1) % n] += 0.5
    return p


def parse_ring(spec: str) -> int | None:
    """``"ring(4)"`` -> 4; anything else -> None."""
    s = spec.replace(" ", "").lower()
    if s.startswith("ring(") and s.endswith(")"):
        try:
            n = int(s[5:-1])
        except ValueError:
            raise ConfigError(f"bad ring shorthand {spec!r}") from None
        if n < 1:
            raise ConfigError("ring needs at least one cell")
        return n
    return None


# --- performance functions ---------------------------------------------------

class CellModel:
    """Performance function of one cell for a given engine.

    The markov engine keeps its truncation between calls and only re-runs the
    automatic truncation when the boundary mass grows past the threshold.
    """

    def __init__(self, cell: CellScenario, engine: str = "markov", state_cap: int = markov.DEFAULT_STATE_CAP):
        if engine not in ENGINES:
            raise ValueError(f"unknown engine {engine!r}; choose from {ENGINES}")
        self.cell = cell
        self.engine = engine
        self.state_cap = state_cap
        self.space: markov.StateSpace | None = None
        self.evaluations = 0

    def scenario(self, lambda_in: Sequence[float]) -> CellScenario:
        return self.cell.with_arrival_rates(self.cell.arrival_rates + np.asarray(lambda_in, dtype=float))

    def kpis(self, lambda_in: Sequence[float], certify: bool = False) -> Kpis:
        sc = self.scenario(lambda_in)
        self.evaluations += 1
        if self.engine == "qs":
            if all(c.is_static for c in sc.classes):
                sol = markov.solve(sc)
                return sol.kpis
            return qs.qs_kpis(sc).kpis
        if certify or self.space is None:
            sol = markov.solve(sc, state_cap=self.state_cap)
            self.space = sol.space
            return sol.kpis
        sol = markov.solve(sc, space=self.space, state_cap=self.state_cap)
        if sol.distribution.tail_mass >= markov.TAIL_TOL:
            sol = markov.solve(sc, state_cap=self.state_cap)
            self.space = markov.StateSpace(tuple(max(a, b) for a, b in zip(sol.space.bounds, self.space.bounds)))
        return sol.kpis

    def __call__(self, lambda_in: Sequence[float]) -> np.ndarray:
        return outgoing_rates(self.kpis(lambda_in), self.scenario(lambda_in))


def outgoing_rates(kpis: Kpis, scenario: CellScenario) -> np.ndarray:
    """``theta_k E(N_k)`` per class."""
    return scenario.mobility_rates * kpis.mean_occupancy


def performance_function(cell: CellScenario, lambda_in: Sequence[float], engine: str = "markov") -> np.ndarray:
    """Outgoing handover rate per class of ``cell`` fed with ``lambda_in``."""
    return CellModel(cell, engine)(lambda_in)


# --- fixed points ------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointResult:
    """Converged handover rates (cells x classes) and KPIs at that point."""

    lambda_in: np.ndarray
    iterations: int
    residual: float
    kpis: tuple[Kpis, ...]
    scenarios: tuple[CellScenario, ...]
    history: tuple[float, ...] = field(default=(), compare=False)
    monotone: bool = True


def _relative_residual(x: np.ndarray, target: np.ndarray) -> float:
    return float((np.abs(x - target) / np.maximum(np.abs(x), RATE_EPS)).max())


def _check_fresh_load(cell: CellScenario, index: int | None = None) -> None:
    rho0 = cell.total_load
    if rho0 >= 1:
        where = "" if index is None else f" in cell {index}"
        raise InfeasibleError(
            f"fresh load rho0 = {rho0:.6g} >= 1{where}: no fixed point (requires rho0 < 1)",
            cell=index, rho0=rho0,
        )


def _iterate(
    evaluate: Callable[[np.ndarray, bool], tuple[np.ndarray, list[Kpis]]],
    x0: np.ndarray,
    damping: float,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, int, float, list[Kpis], list[float], bool]:
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    x = x0.copy()
    history: list[float] = []
    monotone = True
    for it in range(max_iter + 1):
        target, kpis = evaluate(x, False)
        res = _relative_residual(x, target)
        if res < tol:
            # accept only if it survives a freshly certified truncation
            target, kpis = evaluate(x, True)
            res = _relative_residual(x, target)
            if res < tol:
                history.append(res)
                return x, it, res, kpis, history, monotone
        history.append(res)
        nxt = (1 - damping) * x + damping * target
        if it < 50 and np.any(nxt < x - 1e-12 * np.maximum(np.abs(x), 1.0)):
            if monotone:
                log.info("fixed point: iterates not monotone at iteration %d", it)
            monotone = False
        x = nxt
    raise NonConvergenceError(
        f"fixed point not reached in {max_iter} iterations (residual {history[-1]:.3g})",
        iterations=max_iter, residual=history[-1],
    )


def solve_homogeneous(
    cell: CellScenario,
    engine: str = "markov",
    damping: float = 0.5,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> FixedPointResult:
    """Representative cell of a homogeneous network (mobility model).

    ``cell`` carries the fresh arrival rates. Handover arrivals are adjusted
    by damped iteration from zero until ``lambda_in = lambda_out``.
    """
    _check_fresh_load(cell)
    model = CellModel(cell, engine)

    def evaluate(x, certify):
        kp = model.kpis(x[0], certify=certify)
        return outgoing_rates(kp, model.scenario(x[0]))[None, :], [kp]

    x0 = np.zeros((1, cell.n_classes))
    x, it, res, kpis, hist, mono = _iterate(evaluate, x0, damping, tol, max_iter)
    return FixedPointResult(x, it, res, tuple(kpis), (model.scenario(x[0]),), tuple(hist), mono)


def solve_heterogeneous(
    topology: NetworkTopology,
    engine: str = "markov",
    damping: float = 0.5,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> FixedPointResult:
    """Jacobi-style damped iteration over all cells and classes."""
    for i, cell in enumerate(topology.cells):
        rep = markov.check_stability(cell)
        if not rep:
            raise InfeasibleError(
                f"cell {i}: static load rho_S = {rep.rho_static:.6g} >= 1 (stability requires rho_S < 1)",
                cell=i, rho0=cell.total_load,
            )
    models = [CellModel(c, engine) for c in topology.cells]
    routes = np.stack([topology.routing_matrix(k) for k in range(len(topology.names))])  # (K, I, I)

    def evaluate(x, certify):
        outs, kps = [], []
        for i, m in enumerate(models):
            try:
                kp = m.kpis(x[i], certify=certify)
            except UnstableError as exc:
                raise InfeasibleError(f"cell {i}: {exc}", cell=i) from exc
            kps.append(kp)
            outs.append(outgoing_rates(kp, m.scenario(x[i])))
        out = np.array(outs)  # (I, K)
        target = np.einsum("kji,jk->ik", routes, out)
        return target, kps

    x0 = np.zeros((topology.n_cells, len(topology.names)))
    x, it, res, kpis, hist, mono = _iterate(evaluate, x0, damping, tol, max_iter)
    scen = tuple(m.scenario(x[i]) for i, m in enumerate(models))
    return FixedPointResult(x, it, res, tuple(kpis), scen, tuple(hist), mono)
