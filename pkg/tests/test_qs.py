import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from cellflow import markov, qs
from cellflow.errors import UnstableError
from cellflow.model import kpi_identity_check

from conftest import CAPACITY, VOLUME, two_class


def f_oracle(a, rho_s, rho_m, rho_theta):
    return math.exp(-a) * (1 - rho_s) - rho_theta * a - (1 - rho_s - rho_m)


def frozen_static_chain(l, rho_m, rho_theta, mmax):
    """Stationary mobile count with ``l`` static users held fixed (truncated birth-death chain)."""
    mu = 1.0
    lam, theta = rho_m * mu, rho_theta * mu
    n = mmax + 1
    q = np.zeros((n, n))
    for m in range(n):
        if m < mmax:
            q[m, m + 1] = lam
        if m > 0:
            q[m, m - 1] = m * (mu / (l + m) + theta)
    np.fill_diagonal(q, -q.sum(axis=1))
    a = np.vstack([q.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1
    return np.linalg.lstsq(a, b, rcond=None)[0]


@settings(max_examples=60, deadline=None)
@given(rho_s=st.floats(0, 0.99), rho_m=st.floats(1e-4, 10), rho_theta=st.floats(1e-3, 50))
def test_solve_A_matches_brentq(rho_s, rho_m, rho_theta):
    a = qs.solve_A(rho_s, rho_m, rho_theta)
    ref = optimize.brentq(f_oracle, 0, rho_m / rho_theta + 1, args=(rho_s, rho_m, rho_theta), xtol=1e-15)
    assert abs(f_oracle(a, rho_s, rho_m, rho_theta)) < 1e-12
    slope = math.exp(-ref) * (1 - rho_s) + rho_theta
    assert abs(a - ref) <= 2.5e-12 / slope


def test_solve_A_edges():
    assert qs.solve_A(0.5, 0.0, 1.0) == 0.0
    with pytest.raises(UnstableError):
        qs.solve_A(1.0, 0.2, 1.0)


def test_mm_step1_constant():
    assert qs.mm_step1_A(0.25, 0.5) == pytest.approx(math.log(1.5), abs=1e-15)
    with pytest.raises(ValueError):
        qs.mm_step1_A(0.5, 1.0)


@pytest.mark.parametrize("a,rho_s", [(0.3, 0.2), (2.0, 0.7), (8.0, 0.5), (0.01, 0.95)])
def test_marginal_q_three_ways(a, rho_s):
    ls = np.arange(0, 60)
    closed = qs.marginal_q(ls, a, rho_s)
    series = np.array([qs.marginal_q_series(int(l), a, rho_s) for l in ls])
    ms = np.arange(0, 400)
    mixture = (stats.poisson.pmf(ms, a)[None, :] * stats.nbinom.pmf(ls[:, None], ms[None, :] + 1, 1 - rho_s)).sum(axis=1)
    assert np.abs(closed - series).max() < 1e-10
    assert np.abs(closed - mixture).max() < 1e-10


def test_marginal_q_sums_to_one():
    ls = np.arange(0, 3000)
    assert qs.marginal_q(ls, 3.0, 0.9).sum() == pytest.approx(1.0, abs=1e-12)


def test_step1_joint_marginals():
    a, rho_s = 1.7, 0.6
    l = np.arange(0, 200)[:, None]
    m = np.arange(0, 60)[None, :]
    joint = qs.step1_joint(l, m, a, rho_s)
    assert np.abs(joint.sum(axis=0) - stats.poisson.pmf(np.arange(60), a)).max() < 1e-9
    assert np.abs(joint.sum(axis=1) - qs.marginal_q(np.arange(200), a, rho_s)).max() < 1e-9


@pytest.mark.parametrize("rho_m,rho_theta", [(0.4, 0.2), (1.0, 1.0), (3.0, 5.0)])
def test_psi_matches_frozen_chain(rho_m, rho_theta):
    table = qs.psi_table(np.arange(0, 6), rho_m, rho_theta)
    mmax = table.shape[1] - 1
    for l in range(6):
        ref = frozen_static_chain(l, rho_m, rho_theta, mmax)
        assert np.abs(table[l] - ref).max() < 1e-11
        assert abs(table[l].sum() - 1) < 1e-12
        prod = qs.psi_product_form(np.arange(mmax + 1), l, rho_m, rho_theta)
        assert np.abs(prod - table[l]).max() < 1e-12
        assert qs.conditional_psi(2, l, rho_m, rho_theta) == pytest.approx(table[l, 2], rel=1e-12)


def test_psi_rows_normalized_for_large_l():
    table = qs.psi_table(np.arange(0, 2000, 37), 5.0, 0.2)
    assert np.abs(table.sum(axis=1) - 1).max() < 1e-12


@pytest.mark.parametrize("rho_s", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("rho_theta", [0.2, 1.0, 5.0])
def test_qs_identity_and_accuracy(rho_s, rho_theta):
    sc = two_class(rho_s, theta=rho_theta * CAPACITY / VOLUME)
    sol = qs.qs_kpis(sc)
    assert kpi_identity_check(sol.kpis, sc) < 1e-10
    assert kpi_identity_check(sol.step1, sc) < 1e-10
    assert sol.kpis.throughput[0] == sol.step1.throughput[0]
    assert sol.kpis.throughput[1] > sol.kpis.throughput[0]
    assert 0 < sol.kpis.handover[1] < 1


@pytest.mark.parametrize("rho_s", [0.05, 0.1])
def test_qs_slow_mobility_close_to_exact_at_light_load(rho_s):
    sc = two_class(rho_s, theta=0.01 * CAPACITY / VOLUME)
    approx, exact = qs.qs_kpis(sc).kpis, markov.solve(sc).kpis
    assert np.abs(approx.throughput / exact.throughput - 1).max() < 0.02


def test_qs_static_gap_tends_to_frozen_limit():
    # theta -> 0: exact gamma_S -> C(1 - 2 rho), QS gamma_S -> C(1 - rho)/(1 + ln((1 - rho)/(1 - 2 rho)))
    rho = 0.2
    sc = two_class(rho, theta=1e-5 * CAPACITY / VOLUME)
    gap = qs.qs_kpis(sc).kpis.throughput[0] / markov.solve(sc).kpis.throughput[0] - 1
    limit = (1 - rho) / (1 + math.log((1 - rho) / (1 - 2 * rho))) / (1 - 2 * rho) - 1
    assert gap == pytest.approx(limit, rel=1e-3)


def test_A_limit_at_saturated_static_load():
    assert qs.solve_A(1 - 1e-12, 0.6, 0.3) == pytest.approx(2.0, rel=1e-9)


@pytest.mark.parametrize("rho_s,rho_m,rho_theta", [(0.3, 0.3, 1.0), (0.8, 2.0, 0.2), (0.1, 0.5, 5.0)])
def test_step1_consistency_relation(rho_s, rho_m, rho_theta):
    a = qs.solve_A(rho_s, rho_m, rho_theta)
    empty = qs.step1_joint(0, 0, a, rho_s)
    assert a == pytest.approx((rho_s + rho_m + empty - 1) / rho_theta, rel=1e-11)


@pytest.mark.parametrize("rho_theta", [0.1, 1.0, 10.0])
def test_mm_step1_constant_is_self_consistent(rho_theta):
    rho_s0, rho0 = 0.25, 0.5
    a = 0.0
    for _ in range(500):
        a = qs.solve_A(rho_s0, (rho0 - rho_s0) + rho_theta * a, rho_theta)
    assert a == pytest.approx(qs.mm_step1_A(rho_s0, rho0), abs=1e-8)


def test_qs_static_side_closed_form():
    sc = two_class(0.4, 0.4, theta=0.5)
    sol = qs.qs_kpis(sc)
    a = qs.solve_A(0.4, 0.4, 1.0)
    assert sol.kpis.throughput[0] == pytest.approx(CAPACITY * 0.6 / (1 + a), rel=1e-14)
    assert sol.joint.sum() == pytest.approx(1.0, abs=1e-12)
    assert sol.kpis.empty_probability == pytest.approx(sol.joint[0, 0], rel=1e-14)


def test_qs_zero_mobile_traffic():
    sol = qs.qs_kpis(two_class(0.4, 0.0, theta=0.5))
    assert sol.A == 0.0
    assert math.isnan(sol.kpis.handover[1])
    assert sol.kpis.throughput[0] == pytest.approx(CAPACITY * 0.6, rel=1e-14)


def test_spec_example_root():
    assert qs.solve_A(0.3, 0.3, 1.0) == pytest.approx(0.183, abs=5e-4)
