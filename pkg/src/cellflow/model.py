"""Scenario data model, probability laws and derived-rate arithmetic.

Units are fixed throughout the library: volumes in bits, times in seconds,
rates in bits/second (capacity) or 1/second (arrival and mobility rates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateKpiError

MBIT = 1e6
MEAN_RTOL = 1e-9


class Family(str, Enum):
    EXPONENTIAL = "exponential"
    DETERMINISTIC = "deterministic"
    UNIFORM = "uniform"
    PARETO1 = "pareto1"
    PARETO2 = "pareto2"
    HYPEREXP2 = "hyperexp2"


@dataclass(frozen=True)
class Distribution:
    """A positive probability law identified by family and mean.

    ``uniform`` lives on ``[0, 2 * mean]``. ``pareto2`` is the Pareto type II
    (Lomax) law with tail index 2 and scale ``mean``; it has support
    ``[0, inf)`` and infinite variance. ``pareto1`` is the classical Pareto law
    with index 2 and minimum ``mean / 2``. ``hyperexp2`` is the balanced-means
    two-phase hyperexponential with squared coefficient of variation ``scv``.
    """

    family: Family
    mean: float
    scv: float | None = None

    def __post_init__(self):
        try:
            fam = Family(self.family)
        except ValueError:
            raise ConfigError(f"unknown distribution family {self.family!r}") from None
        object.__setattr__(self, "family", fam)
        if not (self.mean > 0 and math.isfinite(self.mean)):
            raise ConfigError(f"distribution mean must be positive and finite, got {self.mean}")
        if fam is Family.HYPEREXP2:
            if self.scv is None or not self.scv >= 1.0:
                raise ConfigError("hyperexp2 needs scv >= 1")
        elif self.scv is not None:
            raise ConfigError(f"scv is only meaningful for hyperexp2, not {fam.value}")

    @classmethod
    def exponential(cls, mean: float) -> Distribution:
        return cls(Family.EXPONENTIAL, mean)

    def with_mean(self, mean: float) -> Distribution:
        return replace(self, mean=mean)

    @property
    def variance(self) -> float:
        m = self.mean
        fam = self.family
        if fam is Family.EXPONENTIAL:
            return m * m
        if fam is Family.DETERMINISTIC:
            return 0.0
        if fam is Family.UNIFORM:
            return (2 * m) ** 2 / 12.0
        if fam is Family.HYPEREXP2:
            return self.scv * m * m
        return math.inf

    def _hyperexp_phases(self) -> tuple[float, float, float]:
        c2 = self.scv
        p1 = 0.5 * (1.0 + math.sqrt((c2 - 1.0) / (c2 + 1.0)))
        p2 = 1.0 - p1
        return p1, 2.0 * p1 / self.mean, 2.0 * p2 / self.mean

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Draw ``size`` values (a scalar when ``size`` is None)."""
        m = self.mean
        fam = self.family
        if fam is Family.EXPONENTIAL:
            return rng.exponential(m, size)
        if fam is Family.DETERMINISTIC:
            return m if size is None else np.full(size, m)
        if fam is Family.UNIFORM:
            return rng.uniform(0.0, 2.0 * m, size)
        if fam is Family.PARETO2:
            return m * rng.pareto(2.0, size)
        if fam is Family.PARETO1:
            return 0.5 * m * (1.0 + rng.pareto(2.0, size))
        p1, r1, r2 = self._hyperexp_phases()
        n = 1 if size is None else size
        first = rng.random(n) < p1
        out = rng.exponential(1.0, n) / np.where(first, r1, r2)
        return float(out[0]) if size is None else out

    def sampler(self, rng: np.random.Generator, block: int = 4096) -> Callable[[], float]:
        """Return a zero-argument callable yielding successive draws.

        Draws are generated in blocks, so the stream is a deterministic
        function of the generator state.
        """
        if self.family is Family.DETERMINISTIC:
            m = float(self.mean)
            return lambda: m

        buf: list[float] = []

        def draw() -> float:
            if not buf:
                buf.extend(self.sample(rng, block)[::-1].tolist())
            return buf.pop()

        return draw


def sample(dist: Distribution, rng: np.random.Generator) -> float:
    """Single draw from ``dist``; advances ``rng``."""
    return float(dist.sample(rng))


def _check_mean(dist: Distribution, expected: float, what: str) -> None:
    if abs(dist.mean - expected) > MEAN_RTOL * expected:
        raise ConfigError(f"{what} distribution mean {dist.mean} != declared {expected}")


@dataclass(frozen=True)
class TrafficClass:
    """One user class: Poisson arrivals, random volume, random cell sojourn.

    A class with ``mobility_rate == 0`` is static and its sojourn law is
    ignored. Distribution means are checked against the declared mean volume
    and ``1 / mobility_rate``; omitted laws default to exponential.
    """

    name: str
    arrival_rate: float
    mean_volume: float
    mobility_rate: float = 0.0
    volume_dist: Distribution | None = None
    sojourn_dist: Distribution | None = None

    def __post_init__(self):
        if not self.arrival_rate >= 0 or not math.isfinite(self.arrival_rate):
            raise ConfigError(f"class {self.name}: arrival_rate must be >= 0")
        if not self.mean_volume > 0 or not math.isfinite(self.mean_volume):
            raise ConfigError(f"class {self.name}: mean_volume must be > 0")
        if not self.mobility_rate >= 0 or not math.isfinite(self.mobility_rate):
            raise ConfigError(f"class {self.name}: mobility_rate must be >= 0")
        if self.volume_dist is None:
            object.__setattr__(self, "volume_dist", Distribution.exponential(self.mean_volume))
        _check_mean(self.volume_dist, self.mean_volume, f"class {self.name}: volume")
        if self.mobility_rate > 0:
            mean_sojourn = 1.0 / self.mobility_rate
            if self.sojourn_dist is None:
                object.__setattr__(self, "sojourn_dist", Distribution.exponential(mean_sojourn))
            _check_mean(self.sojourn_dist, mean_sojourn, f"class {self.name}: sojourn")

    @property
    def is_static(self) -> bool:
        return self.mobility_rate == 0

    @property
    def is_exponential(self) -> bool:
        fams = [self.volume_dist.family]
        if not self.is_static:
            fams.append(self.sojourn_dist.family)
        return all(f is Family.EXPONENTIAL for f in fams)

    def with_arrival_rate(self, rate: float) -> TrafficClass:
        return replace(self, arrival_rate=rate)

    def with_mobility_rate(self, theta: float) -> TrafficClass:
        """Copy with a new mobility rate; the sojourn law family is kept."""
        if theta == 0:
            return replace(self, mobility_rate=0.0, sojourn_dist=None)
        soj = self.sojourn_dist
        soj = Distribution.exponential(1.0 / theta) if soj is None else soj.with_mean(1.0 / theta)
        return replace(self, mobility_rate=theta, sojourn_dist=soj)


@dataclass(frozen=True)
class CellScenario:
    """A cell of capacity ``capacity`` (bits/s) shared by its traffic classes."""

    capacity: float
    classes: tuple[TrafficClass, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.capacity > 0 or not math.isfinite(self.capacity):
            raise ConfigError("capacity must be > 0")
        if not self.classes:
            raise ConfigError("a cell needs at least one traffic class")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate class names: {names}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def arrival_rates(self) -> np.ndarray:
        return np.array([c.arrival_rate for c in self.classes], dtype=float)

    @property
    def mean_volumes(self) -> np.ndarray:
        return np.array([c.mean_volume for c in self.classes], dtype=float)

    @property
    def mobility_rates(self) -> np.ndarray:
        return np.array([c.mobility_rate for c in self.classes], dtype=float)

    @property
    def service_rates(self) -> np.ndarray:
        return self.capacity / self.mean_volumes

    @property
    def loads(self) -> np.ndarray:
        return self.arrival_rates * self.mean_volumes / self.capacity

    @property
    def static_load(self) -> float:
        return float(sum(c.arrival_rate * c.mean_volume for c in self.classes if c.is_static) / self.capacity)

    @property
    def total_load(self) -> float:
        return float(self.loads.sum())

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def with_arrival_rates(self, rates: Sequence[float]) -> CellScenario:
        if len(rates) != self.n_classes:
            raise ValueError("one arrival rate per class expected")
        return replace(self, classes=tuple(c.with_arrival_rate(float(r)) for c, r in zip(self.classes, rates)))

    def with_classes(self, classes: Sequence[TrafficClass]) -> CellScenario:
        return replace(self, classes=tuple(classes))

    def static_mobile_pair(self) -> tuple[int, int]:
        """Indices ``(s, m)`` of the static and mobile class of a two-class cell."""
        if self.n_classes != 2:
            raise ConfigError("expected exactly two classes (one static, one mobile)")
        th = self.mobility_rates
        if th[0] == 0 and th[1] > 0:
            return 0, 1
        if th[1] == 0 and th[0] > 0:
            return 1, 0
        raise ConfigError("expected one static (mobility_rate = 0) and one mobile class")


@dataclass(frozen=True)
class DerivedRates:
    service_rate: np.ndarray
    load: np.ndarray
    mobility_ratio: np.ndarray
    """``theta_k / mu_k`` per class (0 for static classes)."""


def derive_rates(scenario: CellScenario) -> DerivedRates:
    vol = scenario.mean_volumes
    return DerivedRates(
        service_rate=scenario.capacity / vol,
        load=scenario.arrival_rates * vol / scenario.capacity,
        mobility_ratio=scenario.mobility_rates * vol / scenario.capacity,
    )


def mobility_rate_from_speed(speed: float, mean_distance: float) -> float:
    """Cell exit rate of a user moving at ``speed`` (m/s) over ``mean_distance`` (m)."""
    if mean_distance <= 0:
        raise ValueError("mean_distance must be positive")
    return speed / mean_distance


def kmh(speed_kmh: float) -> float:
    return speed_kmh / 3.6


@dataclass(frozen=True)
class Kpis:
    """Per-class performance indicators of one cell.

    ``carried_load[k]`` is ``E(N_k 1{N_k>0} / L(N))``, the mean fraction of
    capacity used by class ``k``.
    """

    names: tuple[str, ...]
    arrival_rates: np.ndarray
    mean_occupancy: np.ndarray
    throughput: np.ndarray
    handover: np.ndarray
    carried_load: np.ndarray
    empty_probability: float
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __getitem__(self, name: str) -> dict[str, float]:
        k = self.names.index(name)
        return {
            "E_N": float(self.mean_occupancy[k]),
            "gamma": float(self.throughput[k]),
            "H": float(self.handover[k]),
            "carried_load": float(self.carried_load[k]),
        }

    @property
    def handover_rate(self) -> np.ndarray:
        """Outgoing handover rate ``lambda_k * H_k = theta_k * E(N_k)``."""
        return self.arrival_rates * np.nan_to_num(self.handover)


def kpi_identity_check(kpis: Kpis, scenario: CellScenario) -> float:
    """Max relative violation of ``H (gamma + theta sigma) = theta sigma``.

    Static classes are skipped. Returns 0 when there is no mobile class.
    """
    worst = 0.0
    for k, cls in enumerate(scenario.classes):
        if cls.is_static:
            continue
        ts = cls.mobility_rate * cls.mean_volume
        denom = kpis.throughput[k] + ts
        if denom == 0:
            raise DegenerateKpiError(f"class {cls.name}: gamma + theta*sigma = 0")
        h = kpis.handover[k]
        target = ts / denom
        worst = max(worst, abs(h - target) / h if h > 0 else abs(h - target))
    return float(worst)
