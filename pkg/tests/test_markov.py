import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellflow import markov
from cellflow.errors import CapExceededError, ExcessTailMassError, UnstableError
from cellflow.model import CellScenario, TrafficClass, kpi_identity_check

from conftest import CAPACITY, single, two_class


def dense_oracle(scenario, bounds):
    """Stationary law of the truncated chain, built state by state and solved densely."""
    states = list(itertools.product(*(range(b + 1) for b in bounds)))
    pos = {s: i for i, s in enumerate(states)}
    q = np.zeros((len(states), len(states)))
    for s in states:
        total = sum(s)
        for k, c in enumerate(scenario.classes):
            up = list(s)
            up[k] += 1
            if tuple(up) in pos:
                q[pos[s], pos[tuple(up)]] += c.arrival_rate
            if s[k] > 0:
                down = list(s)
                down[k] -= 1
                rate = s[k] * (scenario.capacity / c.mean_volume / total + c.mobility_rate)
                q[pos[s], pos[tuple(down)]] += rate
    np.fill_diagonal(q, -q.sum(axis=1))
    a = np.vstack([q.T, np.ones(len(states))])
    b = np.zeros(len(states) + 1)
    b[-1] = 1
    pi = np.linalg.lstsq(a, b, rcond=None)[0]
    return pi.reshape([x + 1 for x in bounds])


def test_state_space_indexing():
    sp = markov.StateSpace((3, 5))
    assert sp.size == 24 and sp.shape == (4, 6)
    for i in range(sp.size):
        assert sp.index(sp.state(i)) == i
    assert sp.states().shape == (2, 24)
    assert sp.doubled([1]).bounds == (3, 10)


@pytest.mark.parametrize("method", ["direct", "power", "gauss-seidel"])
def test_solvers_match_dense_oracle(method):
    sc = two_class(0.5, 0.4, theta=0.3)
    space = markov.StateSpace((12, 9))
    gen = markov.build_generator(sc, space)
    dist = markov.solve_stationary(gen, method=method, tol=1e-12)
    assert np.abs(dist.probabilities - dense_oracle(sc, (12, 9))).max() < 1e-9


def test_generator_rows_sum_to_zero():
    gen = markov.build_generator(two_class(0.3), markov.StateSpace((10, 10)))
    assert np.abs(np.asarray(gen.matrix.sum(axis=1))).max() < 1e-9


@pytest.mark.parametrize("rho", [0.1, 0.5, 0.9])
def test_single_class_ps_closed_form(rho):
    sol = markov.solve(single(rho))
    assert sol.kpis.mean_occupancy[0] == pytest.approx(rho / (1 - rho), rel=1e-6)
    assert sol.kpis.throughput[0] == pytest.approx(CAPACITY * (1 - rho), rel=1e-6)
    assert sol.kpis.empty_probability == pytest.approx(1 - rho, rel=1e-6)


def test_multiclass_static_product_form():
    # all-static PS: E(N_k) = rho_k / (1 - rho), every class sees C (1 - rho)
    sc = CellScenario(CAPACITY, (TrafficClass("a", 0.1, 50e6), TrafficClass("b", 0.2, 100e6)))
    rho = sc.loads
    sol = markov.solve(sc)
    assert np.allclose(sol.kpis.mean_occupancy, rho / (1 - rho.sum()), rtol=1e-6)
    assert np.allclose(sol.kpis.throughput, CAPACITY * (1 - rho.sum()), rtol=1e-6)


def test_mobile_only_cell_conserves_flow():
    sc = two_class(0.0, 0.6, theta=0.4)
    sol = markov.solve(sc)
    assert markov.conservation_residual(sol.distribution, sc).max() < 1e-9


def test_unstable_rejected():
    with pytest.raises(UnstableError):
        markov.solve(two_class(1.0, 0.1))
    assert not markov.check_stability(two_class(1.0, 0.1))
    assert markov.check_stability(two_class(0.95, 5.0))


def test_state_cap():
    with pytest.raises(CapExceededError):
        markov.build_generator(two_class(0.5), markov.StateSpace((3000, 3000)), state_cap=1000)


def test_tail_threshold():
    gen = markov.build_generator(single(0.9), markov.StateSpace((4,)))
    with pytest.raises(ExcessTailMassError):
        markov.solve_stationary(gen, tail_threshold=1e-6)


def test_auto_truncation_grows_busy_class():
    sol = markov.solve(two_class(0.9, 0.05, theta=1.0))
    assert sol.space.bounds[0] > sol.space.bounds[1]
    assert sol.distribution.tail_mass < markov.TAIL_TOL


def test_mobility_raises_throughput():
    sol = markov.solve(two_class(0.4))
    g = sol.kpis.throughput
    assert g[1] > g[0]
    assert 0 < sol.kpis.handover[1] < 1


@settings(max_examples=25, deadline=None)
@given(rho_s=st.floats(0.0, 0.85), rho_m=st.floats(0.0, 2.0), theta=st.floats(0.01, 3.0))
def test_conservation_and_identity_hold(rho_s, rho_m, theta):
    sc = two_class(rho_s, rho_m, theta=theta)
    sol = markov.solve(sc)
    assert markov.conservation_residual(sol.distribution, sc).max() < 1e-6
    if rho_m > 0:
        assert kpi_identity_check(sol.kpis, sc) < 1e-6
    assert sol.distribution.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert sol.distribution.probabilities.min() > -1e-15
