"""Exact truncated-CTMC engine for the multi-class PS cell with impatience.

State ``n = (n_1, ..., n_K)`` counts the active transfers per class. From
``n`` the chain jumps to ``n + e_k`` at rate ``lambda_k`` and to ``n - e_k``
at rate ``n_k * (mu_k / L(n) + theta_k)``, where ``L(n) = sum(n)``. The
lattice is truncated at per-class bounds; arrivals that would cross a bound
are dropped and the probability of boundary states is reported as tail mass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CapExceededError,
    ExcessTailMassError,
    NonConvergenceError,
    UnstableError,
)
from .model import CellScenario, Kpis

log = logging.getLogger(__name__)

DEFAULT_STATE_CAP = 4_000_000
BALANCE_TOL = 1e-10
TAIL_TOL = 1e-9
KPI_TOL = 1e-6
INITIAL_BOUND = 32


@dataclass(frozen=True)
class StateSpace:
    """Truncated lattice ``{n : 0 <= n_k <= bounds[k]}`` in C order."""

    bounds: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(int(b) for b in self.bounds))
        if not self.bounds or min(self.bounds) < 1:
            raise ValueError("truncation bounds must be >= 1")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b + 1 for b in self.bounds)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def strides(self) -> tuple[int, ...]:
        shape = self.shape
        return tuple(math.prod(shape[k + 1:]) for k in range(len(shape)))

    def states(self) -> np.ndarray:
        """``(K, size)`` integer array; column ``i`` is the state of index ``i``."""
        return np.indices(self.shape).reshape(len(self.shape), -1)

    def index(self, state) -> int:
        return int(np.ravel_multi_index(tuple(state), self.shape))

    def state(self, index: int) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unravel_index(index, self.shape))

    def doubled(self, classes=None) -> StateSpace:
        classes = range(len(self.bounds)) if classes is None else set(classes)
        return StateSpace(tuple(2 * b if k in classes else b for k, b in enumerate(self.bounds)))


@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    rho_static: float

    def __bool__(self) -> bool:
        return self.stable


def check_stability(scenario: CellScenario) -> StabilityReport:
    """Stationary regime exists iff the total static load is below 1."""
    rho_s = scenario.static_load
    return StabilityReport(rho_s < 1.0, rho_s)


def _require_stable(scenario: CellScenario) -> None:
    rep = check_stability(scenario)
    if not rep:
        raise UnstableError(
            f"static load rho_S = {rep.rho_static:.6g} >= 1: no stationary regime "
            "(stability requires rho_S < 1)",
            rho_static=rep.rho_static,
        )


@dataclass(frozen=True)
class Generator:
    matrix: sp.csr_matrix
    space: StateSpace
    scenario: CellScenario

    @property
    def max_exit_rate(self) -> float:
        return float(-self.matrix.diagonal().min())


def build_generator(
    scenario: CellScenario, space: StateSpace, state_cap: int = DEFAULT_STATE_CAP
) -> Generator:
    """Sparse infinitesimal generator on the truncated lattice."""
    _require_stable(scenario)
    if len(space.bounds) != scenario.n_classes:
        raise ValueError("state space dimension does not match the number of classes")
    if space.size > state_cap:
        raise CapExceededError(f"{space.size} states exceed the cap of {state_cap}")

    n = space.size
    grid = space.states()
    occ = grid.sum(axis=0)
    safe_occ = np.maximum(occ, 1)
    idx = np.arange(n)
    lam = scenario.arrival_rates
    mu = scenario.service_rates
    theta = scenario.mobility_rates

    rows, cols, vals = [], [], []
    for k, stride in enumerate(space.strides):
        nk = grid[k]
        if lam[k] > 0:
            up = nk < space.bounds[k]
            rows.append(idx[up])
            cols.append(idx[up] + stride)
            vals.append(np.full(int(up.sum()), lam[k]))
        down = nk > 0
        rate = nk[down] * (mu[k] / safe_occ[down] + theta[k])
        rows.append(idx[down])
        cols.append(idx[down] - stride)
        vals.append(rate)

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    out = np.bincount(rows, weights=vals, minlength=n)
    rows = np.concatenate([rows, idx])
    cols = np.concatenate([cols, idx])
    vals = np.concatenate([vals, -out])
    q = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return Generator(q, space, scenario)


@dataclass(frozen=True)
class StationaryDistribution:
    """Stationary mass on a truncated lattice (array of shape ``space.shape``)."""

    probabilities: np.ndarray
    space: StateSpace
    residual: float
    iterations: int
    method: str

    @property
    def tail_mass(self) -> float:
        """Total probability of states with at least one class at its bound."""
        p = self.probabilities
        inner = p[tuple(slice(0, b) for b in self.space.bounds)]
        return float(max(p.sum() - inner.sum(), 0.0))

    @property
    def class_tail_mass(self) -> np.ndarray:
        """Per class, probability that the class sits at its bound."""
        p = self.probabilities
        out = []
        for k, b in enumerate(self.space.bounds):
            sl = [slice(None)] * p.ndim
            sl[k] = b
            out.append(float(p[tuple(sl)].sum()))
        return np.array(out)

    def __getitem__(self, state) -> float:
        return float(self.probabilities[tuple(state)])


def balance_residual(generator: Generator, pi: np.ndarray) -> float:
    """Max-norm of ``pi Q`` (global balance violation)."""
    return float(np.abs(generator.matrix.T @ pi.ravel()).max())


def _solve_direct(gen: Generator, tol: float, max_iter: int) -> tuple[np.ndarray, float, int]:
    a = gen.matrix.T.tocsc()
    n = a.shape[0]
    if n == 1:
        return np.ones(1), 0.0, 0
    # pin the empty state and solve the remaining equations
    ar = a[1:, 1:].tocsc()
    lu = spla.splu(ar)
    x = np.empty(n)
    x[0] = 1.0
    x[1:] = lu.solve(-a[1:, 0].toarray().ravel())
    pi = x / x.sum()
    res = float(np.abs(a @ pi).max())
    it = 0
    while res >= tol and it < max_iter:
        # iterative refinement with the same factorisation
        r = a @ pi
        delta = lu.solve(-r[1:])
        pi[1:] += delta
        pi = np.maximum(pi, 0.0)
        pi /= pi.sum()
        res = float(np.abs(a @ pi).max())
        it += 1
    return pi, res, it


def _solve_power(gen: Generator, tol: float, max_iter: int) -> tuple[np.ndarray, float, int]:
    q = gen.matrix
    n = q.shape[0]
    lam = 1.02 * max(gen.max_exit_rate, 1e-300)
    pt = (sp.identity(n, format="csr") + q / lam).T.tocsr()
    qt = q.T.tocsr()
    pi = np.full(n, 1.0 / n)
    res = math.inf
    for it in range(1, max_iter + 1):
        pi = pt @ pi
        if it % 20 == 0:
            pi /= pi.sum()
            res = float(np.abs(qt @ pi).max())
            if res < tol:
                return pi, res, it
    raise NonConvergenceError(f"power iteration: residual {res:.3g} after {max_iter} iterations",
                              iterations=max_iter, residual=res)


def _solve_gauss_seidel(gen: Generator, tol: float, max_iter: int) -> tuple[np.ndarray, float, int]:
    a = gen.matrix.T.tocsr()
    n = a.shape[0]
    lower = sp.tril(a, k=0, format="csr")
    upper = sp.triu(a, k=1, format="csr")
    pi = np.full(n, 1.0 / n)
    res = math.inf
    for it in range(1, max_iter + 1):
        pi = spla.spsolve_triangular(lower, -(upper @ pi), lower=True)
        pi = np.abs(pi)
        pi /= pi.sum()
        res = float(np.abs(a @ pi).max())
        if res < tol:
            return pi, res, it
    raise NonConvergenceError(f"Gauss-Seidel: residual {res:.3g} after {max_iter} sweeps",
                              iterations=max_iter, residual=res)


_METHODS = {
    "direct": _solve_direct,
    "power": _solve_power,
    "gauss-seidel": _solve_gauss_seidel,
}


def solve_stationary(
    generator: Generator,
    method: str = "direct",
    tol: float = BALANCE_TOL,
    max_iter: int | None = None,
    tail_threshold: float | None = None,
) -> StationaryDistribution:
    """Stationary distribution of a truncated generator.

    ``method`` is ``"direct"`` (sparse LU followed by iterative refinement,
    the default), ``"power"`` (power iteration on the uniformized chain) or
    ``"gauss-seidel"``. All three stop once ``max |pi Q| < tol``.
    """
    try:
        solver = _METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(_METHODS)}") from None
    if max_iter is None:
        max_iter = {"direct": 10, "power": 500_000, "gauss-seidel": 50_000}[method]
    pi, res, it = solver(generator, tol, max_iter)
    if res >= tol:
        raise NonConvergenceError(f"{method}: balance residual {res:.3g} >= {tol:.1g}",
                                  iterations=it, residual=res)
    dist = StationaryDistribution(pi.reshape(generator.space.shape), generator.space, res, it, method)
    if tail_threshold is not None and dist.tail_mass > tail_threshold:
        raise ExcessTailMassError(
            f"boundary mass {dist.tail_mass:.3g} exceeds {tail_threshold:.1g}; enlarge the truncation",
            dist.tail_mass,
        )
    return dist


def _moments(dist: StationaryDistribution) -> tuple[np.ndarray, np.ndarray]:
    """``E(N_k)`` and ``E(N_k 1{N_k>0} / L(N))`` for every class."""
    p = dist.probabilities
    grids = np.indices(dist.space.shape)
    occ = grids.sum(axis=0)
    inv = np.where(occ > 0, 1.0 / np.maximum(occ, 1), 0.0)
    mean = np.array([float((p * g).sum()) for g in grids])
    share = np.array([float((p * g * inv).sum()) for g in grids])
    return mean, share


def compute_kpis(dist: StationaryDistribution, scenario: CellScenario) -> Kpis:
    """Mean occupancy, throughput and handover probability per class."""
    mean, share = _moments(dist)
    lam = scenario.arrival_rates
    theta = scenario.mobility_rates
    cap = scenario.capacity
    gamma = np.empty_like(mean)
    handover = np.zeros_like(mean)
    for k in range(scenario.n_classes):
        if mean[k] > 0:
            gamma[k] = cap * share[k] / mean[k]
        else:
            if lam[k] > 0:
                log.warning("class %s: zero occupancy with positive arrivals", scenario.names[k])
            gamma[k] = cap
        if theta[k] > 0 and lam[k] > 0:
            handover[k] = mean[k] * theta[k] / lam[k]
    empty = float(dist.probabilities.flat[0])
    return Kpis(
        names=scenario.names,
        arrival_rates=lam,
        mean_occupancy=mean,
        throughput=gamma,
        handover=handover,
        carried_load=share,
        empty_probability=empty,
        diagnostics={
            "engine": "markov",
            "bounds": dist.space.bounds,
            "states": dist.space.size,
            "tail_mass": dist.tail_mass,
            "balance_residual": dist.residual,
            "iterations": dist.iterations,
        },
    )


def conservation_residual(dist: StationaryDistribution, scenario: CellScenario) -> np.ndarray:
    """Per class ``|lambda - mu E(N 1/L) - theta E(N)|``, relative to ``lambda`` when positive."""
    mean, share = _moments(dist)
    lam = scenario.arrival_rates
    gap = np.abs(lam - scenario.service_rates * share - scenario.mobility_rates * mean)
    return np.where(lam > 0, gap / np.where(lam > 0, lam, 1.0), gap)


def _kpi_change(a: Kpis, b: Kpis) -> float:
    worst = 0.0
    for x, y in ((a.mean_occupancy, b.mean_occupancy), (a.throughput, b.throughput),
                 (a.handover, b.handover)):
        scale = np.maximum(np.abs(y), 1e-300)
        diff = np.where(np.abs(y) > 0, np.abs(x - y) / scale, np.abs(x - y))
        worst = max(worst, float(diff.max()))
    return worst


@dataclass(frozen=True)
class MarkovSolution:
    scenario: CellScenario
    space: StateSpace
    distribution: StationaryDistribution
    kpis: Kpis
    solves: int = 1
    history: tuple = field(default=(), compare=False)


def _initial_space(scenario: CellScenario, initial: int) -> StateSpace:
    lam = scenario.arrival_rates
    return StateSpace(tuple(initial if l > 0 else 1 for l in lam))


def solve(
    scenario: CellScenario,
    tol: float = KPI_TOL,
    tail_tol: float = TAIL_TOL,
    state_cap: int = DEFAULT_STATE_CAP,
    initial: int = INITIAL_BOUND,
    method: str = "direct",
    space: StateSpace | None = None,
) -> MarkovSolution:
    """Solve a cell with automatic truncation (see :func:`auto_truncate`).

    With an explicit ``space`` a single solve is done on that lattice.
    """
    _require_stable(scenario)
    if space is not None:
        dist = solve_stationary(build_generator(scenario, space, state_cap), method=method)
        return MarkovSolution(scenario, space, dist, compute_kpis(dist, scenario))

    space = _initial_space(scenario, initial)
    active = [k for k, l in enumerate(scenario.arrival_rates) if l > 0]
    prev: Kpis | None = None
    history = []
    solves = 0
    while True:
        if space.size > state_cap:
            raise CapExceededError(
                f"truncation {space.bounds} ({space.size} states) exceeds the cap of {state_cap}"
            )
        dist = solve_stationary(build_generator(scenario, space, state_cap), method=method)
        kpis = compute_kpis(dist, scenario)
        solves += 1
        tails = dist.class_tail_mass
        change = math.inf if prev is None else _kpi_change(kpis, prev)
        history.append((space.bounds, float(tails.sum()), change))
        log.debug("truncation %s: tail %.3g, kpi change %.3g", space.bounds, tails.sum(), change)
        if dist.tail_mass < tail_tol and change < tol:
            return MarkovSolution(scenario, space, dist, kpis, solves, tuple(history))
        grow = [k for k in active if tails[k] >= tail_tol]
        if not grow:
            grow = active
        prev = kpis
        space = space.doubled(grow)


def auto_truncate(
    scenario: CellScenario,
    tol: float = KPI_TOL,
    tail_tol: float = TAIL_TOL,
    state_cap: int = DEFAULT_STATE_CAP,
    initial: int = INITIAL_BOUND,
) -> StateSpace:
    """Smallest doubling of the bounds that certifies the KPIs.

    Starting from ``initial`` per class, bounds of classes with boundary mass
    above ``tail_tol`` are doubled; once the tail is small the bounds are
    doubled once more and accepted when no KPI moves by more than ``tol``
    (relative). Refuses unstable scenarios before building anything.
    """
    return solve(scenario, tol, tail_tol, state_cap, initial).space
