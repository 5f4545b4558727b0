"""Two-step quasi-stationary approximation for a static/mobile cell.

Step 1 freezes the number of mobile users, taken Poisson with mean ``A``;
static users then see a PS queue with ``m`` permanent customers. Step 2
freezes the number of static users at its step-1 marginal ``q`` and lets
mobile users relax to the conditional law ``Psi(. | l)`` of a PS queue with
impatience and ``l`` permanent customers.

Loads are dimensionless: ``rho_s`` and ``rho_m`` are offered loads and
``rho_theta = theta_M / mu_M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import UnstableError
from .model import CellScenario, Kpis

ROOT_TOL = 1e-12
TERM_RTOL = 1e-16
RUN_LENGTH = 10


def fixed_point_residual(a: float, rho_s: float, rho_m: float, rho_theta: float) -> float:
    """``f(A) = exp(-A)(1 - rho_s) - rho_theta A - (1 - rho_s - rho_m)``."""
    return math.exp(-a) * (1.0 - rho_s) - rho_theta * a - (1.0 - rho_s - rho_m)


def solve_A(rho_s: float, rho_m: float, rho_theta: float, tol: float = ROOT_TOL) -> float:
    """Nonnegative root of :func:`fixed_point_residual`.

    ``f(0) = rho_m >= 0`` and ``f`` is strictly decreasing, so the root is
    unique and lies in ``[0, rho_m / rho_theta]``. Bisection brackets it,
    Newton polishes it.
    """
    if not 0 <= rho_s < 1:
        raise UnstableError(f"rho_S = {rho_s} must lie in [0, 1)", rho_static=rho_s)
    if rho_m < 0 or rho_theta <= 0:
        raise ValueError("need rho_m >= 0 and rho_theta > 0")
    if rho_m == 0:
        return 0.0

    def f(a):
        return fixed_point_residual(a, rho_s, rho_m, rho_theta)

    lo, hi = 0.0, rho_m / rho_theta + 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6 * max(hi, 1e-300):
            break
    a = 0.5 * (lo + hi)
    for _ in range(50):
        fa = f(a)
        if abs(fa) < tol:
            break
        step = fa / (-math.exp(-a) * (1.0 - rho_s) - rho_theta)
        nxt = a - step
        if not lo <= nxt <= hi:
            nxt = 0.5 * (lo + hi)
        if f(nxt) > 0:
            lo = nxt
        else:
            hi = nxt
        if nxt == a:
            break
        a = nxt
    return a


def mm_step1_A(rho_s0: float, rho0: float) -> float:
    """Step-1 constant of the mobility model, ``ln[(1 - rho_s0) / (1 - rho0)]``.

    Feeding back handovers (``lambda_M = lambda_M0 + theta_M A``) turns the
    step-1 equation into ``exp(-A)(1 - rho_s0) = 1 - rho0``, whose root does
    not depend on the mobility rate.
    """
    if not (0 <= rho_s0 < 1 and rho0 < 1 and rho0 >= rho_s0):
        raise ValueError("need 0 <= rho_s0 <= rho0 < 1")
    return math.log((1.0 - rho_s0) / (1.0 - rho0))


# --- step 1 -----------------------------------------------------------------

def _log_laguerre_sum(ls: np.ndarray, x: float, block: int = 512) -> np.ndarray:
    """``log sum_{k<=l} C(l,k) x^k / k!`` for every ``l`` in ``ls``."""
    flat = ls.ravel()
    if x == 0 or flat.size == 0:
        return np.zeros(ls.shape)
    lmax = int(flat.max())
    k = np.arange(lmax + 1)
    logk = k * math.log(x) - 2 * gammaln(k + 1)
    out = np.empty(flat.size)
    for start in range(0, flat.size, block):
        l = flat[start:start + block, None]
        with np.errstate(invalid="ignore"):
            terms = gammaln(l + 1) - gammaln(np.maximum(l - k + 1, 1)) + logk
        terms = np.where(k <= l, terms, -np.inf)
        out[start:start + block] = logsumexp(terms, axis=1)
    return out.reshape(ls.shape)


def marginal_q(l, a: float, rho_s: float):
    """Step-1 marginal law of the static count, closed form.

    ``q(l) = exp(-A rho_s) rho_s^l (1 - rho_s) sum_k C(l,k) [A(1 - rho_s)]^k / k!``
    """
    ls = np.asarray(l, dtype=int)
    if rho_s == 0:
        out = np.where(ls == 0, math.exp(-0.0), 0.0)
        return float(out) if out.ndim == 0 else out
    x = a * (1.0 - rho_s)
    logq = -a * rho_s + ls * math.log(rho_s) + math.log1p(-rho_s) + _log_laguerre_sum(ls, x)
    out = np.exp(logq)
    return float(out) if out.ndim == 0 else out


def marginal_q_series(l: int, a: float, rho_s: float, terms: int = 200) -> float:
    """Same marginal as :func:`marginal_q`, summed over the mobile count."""
    m = np.arange(terms)
    x = a * (1.0 - rho_s)
    with np.errstate(divide="ignore"):
        logt = (
            -a + l * math.log(rho_s) + math.log1p(-rho_s)
            + gammaln(l + m + 1) - gammaln(l + 1) - gammaln(m + 1)
            + (m * math.log(x) if x > 0 else np.where(m == 0, 0.0, -np.inf))
            - gammaln(m + 1)
        )
    return float(np.exp(logt).sum())


def step1_joint(l, m, a: float, rho_s: float):
    """``e^-A A^m/m! C(l+m, m) rho_s^l (1 - rho_s)^(m+1)``."""
    l = np.asarray(l, dtype=float)
    m = np.asarray(m, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_am = np.where(m == 0, 0.0, m * math.log(a)) if a > 0 else np.where(m == 0, 0.0, -np.inf)
        log_rl = np.where(l == 0, 0.0, l * math.log(rho_s)) if rho_s > 0 else np.where(l == 0, 0.0, -np.inf)
        logp = (
            -a + log_am - gammaln(m + 1)
            + gammaln(l + m + 1) - gammaln(l + 1) - gammaln(m + 1)
            + log_rl + (m + 1) * math.log1p(-rho_s)
        )
    out = np.exp(logp)
    return float(out) if out.ndim == 0 else out


# --- step 2 -----------------------------------------------------------------

def _poisson_cutoff(mean: float, rtol: float = TERM_RTOL) -> int:
    """Index beyond which Poisson(mean) terms stay below ``rtol`` of the mode."""
    if mean <= 0:
        return RUN_LENGTH
    mode = math.floor(mean)
    log_mode = mode * math.log(mean) - math.lgamma(mode + 1) if mode > 0 else 0.0
    m = max(mode, 1)
    run = 0
    while True:
        m += 1
        logt = m * math.log(mean) - math.lgamma(m + 1)
        if logt - log_mode < math.log(rtol):
            run += 1
            if run >= RUN_LENGTH:
                return m
        else:
            run = 0


def psi_table(ls, rho_m: float, rho_theta: float, mmax: int | None = None) -> np.ndarray:
    """Normalized ``Psi(m | l)`` for each ``l`` (rows) and ``m = 0..mmax`` (columns).

    Built from the local-balance ratio
    ``Psi(m)/Psi(m-1) = (rho_m/rho_theta) (1/m) (l+m) / (l+m+1/rho_theta)``.
    The default ``mmax`` is where Poisson(``rho_m/rho_theta``), which
    dominates every row, becomes negligible.
    """
    ls = np.atleast_1d(np.asarray(ls, dtype=float))
    if rho_m == 0:
        out = np.zeros((ls.size, 1 if mmax is None else mmax + 1))
        out[:, 0] = 1.0
        return out
    if mmax is None:
        mmax = _poisson_cutoff(rho_m / rho_theta)
    m = np.arange(1, mmax + 1, dtype=float)
    lr = (
        math.log(rho_m / rho_theta) - np.log(m)[None, :]
        + np.log(ls[:, None] + m[None, :])
        - np.log(ls[:, None] + m[None, :] + 1.0 / rho_theta)
    )
    logpsi = np.concatenate([np.zeros((ls.size, 1)), np.cumsum(lr, axis=1)], axis=1)
    logpsi -= logsumexp(logpsi, axis=1, keepdims=True)
    return np.exp(logpsi)


def conditional_psi(m: int, l: int, rho_m: float, rho_theta: float) -> float:
    """``Psi(m | l)`` via the local-balance recursion."""
    row = psi_table([l], rho_m, rho_theta)[0]
    if m >= row.size:
        row = psi_table([l], rho_m, rho_theta, mmax=m + RUN_LENGTH)[0]
    return float(row[m])


def psi_product_form(m, l: int, rho_m: float, rho_theta: float, mmax: int | None = None):
    """``Psi(m | l)`` from the closed product, written with gamma functions.

    ``prod_{k=1..m} (l+k)/(l+k+1/rho_theta)
    = Gamma(l+m+1) Gamma(l+1+1/rho_theta) / (Gamma(l+1) Gamma(l+m+1+1/rho_theta))``
    """
    if rho_m == 0:
        return np.where(np.asarray(m) == 0, 1.0, 0.0)
    if mmax is None:
        mmax = _poisson_cutoff(rho_m / rho_theta)
    c = 1.0 / rho_theta
    j = np.arange(mmax + 1, dtype=float)
    logw = (
        j * math.log(rho_m / rho_theta) - gammaln(j + 1)
        + gammaln(l + j + 1) - gammaln(l + 1)
        - gammaln(l + j + 1 + c) + gammaln(l + 1 + c)
    )
    logw -= logsumexp(logw)
    return np.exp(logw)[np.asarray(m)]


def _q_cutoff(a: float, rho_s: float, rtol: float = 1e-16) -> int:
    """Number of ``l`` values holding all but ``rtol`` of the mass of ``q``."""
    if rho_s == 0:
        return 1
    # q is dominated by a negative-binomial-like tail; grow in chunks.
    n = 64
    while True:
        ls = np.arange(n)
        q = marginal_q(ls, a, rho_s)
        tail = q[-RUN_LENGTH:]
        if q.sum() > 0 and np.all(tail < rtol * q.sum()) and np.all(np.diff(tail) <= 0):
            return n
        n *= 2


@dataclass(frozen=True)
class QsSolution:
    """Result of the two-step QS approximation on a static/mobile cell."""

    A: float
    q: np.ndarray
    psi: np.ndarray
    mean_mobile: float
    step1: Kpis
    kpis: Kpis

    @property
    def joint(self) -> np.ndarray:
        """Step-2 joint law ``Psi(m | l) q(l)``, rows indexed by ``l``."""
        return self.psi * self.q[:, None]


def qs_kpis(scenario: CellScenario) -> QsSolution:
    """Approximate KPIs of a two-class cell (one static, one mobile class)."""
    s, mob = scenario.static_mobile_pair()
    cap = scenario.capacity
    rho = scenario.loads
    rho_s, rho_m = float(rho[s]), float(rho[mob])
    if rho_s >= 1:
        raise UnstableError(f"static load rho_S = {rho_s:.6g} >= 1", rho_static=rho_s)
    mu_m = float(scenario.service_rates[mob])
    theta = float(scenario.mobility_rates[mob])
    lam_m = float(scenario.arrival_rates[mob])
    sigma_m = float(scenario.mean_volumes[mob])
    rho_theta = theta / mu_m

    a = solve_A(rho_s, rho_m, rho_theta)
    gamma_s = cap * (1.0 - rho_s) / (1.0 + a)
    mean_s = (1.0 + a) * rho_s / (1.0 - rho_s)

    nl = _q_cutoff(a, rho_s)
    ls = np.arange(nl)
    q = marginal_q(ls, a, rho_s)
    psi = psi_table(ls, rho_m, rho_theta)
    mvals = np.arange(psi.shape[1])
    cond_mean = psi @ mvals
    mean_m = float(q @ cond_mean)

    def build(mean_mobile: float, empty: float, step: int) -> Kpis:
        mean = np.zeros(2)
        gamma = np.zeros(2)
        handover = np.zeros(2)
        mean[s], mean[mob] = mean_s, mean_mobile
        gamma[s] = gamma_s
        if lam_m > 0 and mean_mobile > 0:
            gamma[mob] = sigma_m * (lam_m / mean_mobile - theta)
            handover[mob] = mean_mobile * theta / lam_m
        else:
            gamma[mob] = math.nan
            handover[mob] = math.nan
        carried = np.zeros(2)
        carried[s] = rho_s
        carried[mob] = rho_m - rho_theta * mean_mobile
        return Kpis(
            names=scenario.names,
            arrival_rates=scenario.arrival_rates,
            mean_occupancy=mean,
            throughput=gamma,
            handover=handover,
            carried_load=carried,
            empty_probability=empty,
            diagnostics={"engine": f"qs-step{step}", "A": a, "l_max": nl - 1, "m_max": psi.shape[1] - 1},
        )

    step1 = build(a, math.exp(-a) * (1.0 - rho_s), 1)
    step2 = build(mean_m, float(q[0] * psi[0, 0]), 2)
    return QsSolution(a, q, psi, mean_m, step1, step2)
