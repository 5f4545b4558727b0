from __future__ import annotations

import pytest

from cellflow.model import CellScenario, Distribution, TrafficClass

CAPACITY = 50e6
VOLUME = 100e6


def two_class(rho_s: float, rho_m: float | None = None, theta: float = 0.1,
              capacity: float = CAPACITY, volume: float = VOLUME,
              sojourn: str = "exponential", volume_law: str = "exponential") -> CellScenario:
    """Static/mobile cell; the mobile load defaults to the static one (half the users mobile)."""
    rho_m = rho_s if rho_m is None else rho_m
    vol = Distribution(volume_law, volume)
    mobile = TrafficClass("mobile", rho_m * capacity / volume, volume, theta, volume_dist=vol,
                          sojourn_dist=Distribution(sojourn, 1 / theta) if theta > 0 else None)
    static = TrafficClass("static", rho_s * capacity / volume, volume, 0.0, volume_dist=vol)
    return CellScenario(capacity, (static, mobile))


def fresh(rho0: float, theta: float, capacity: float = CAPACITY, volume: float = VOLUME) -> CellScenario:
    """Cell whose fresh load ``rho0`` is split evenly between the two classes."""
    return two_class(rho0 / 2, rho0 / 2, theta, capacity, volume)


def single(rho: float, capacity: float = CAPACITY, volume: float = VOLUME, theta: float = 0.0) -> CellScenario:
    return CellScenario(capacity, (TrafficClass("only", rho * capacity / volume, volume, theta),))


@pytest.fixture
def im_cell():
    return two_class(0.4)


# --- acceptance reporting ------------------------------------------------------

_VERDICTS: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    """Record ``(number, ok, detail)``; one summary line per criterion is printed at the end."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _VERDICTS.setdefault(number, []).append((bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        parts = _VERDICTS[n]
        ok = all(p[0] for p in parts)
        detail = "; ".join(p[1] for p in parts)
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
