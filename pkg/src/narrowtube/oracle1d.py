"""Closed-form 1-D reference solutions for validating the Monte Carlo runs.

Everything here uses the variance-2t clock (generator d^2/dx^2, not half of
it). Off-by-two in the time scale is the classic failure mode when mixing
conventions, so: displacement variance over time t is 2t per coordinate,
mean exit time of the interval (0, L) from a is a(L-a)/2, and the interval
survival series below carries the matching exponents.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from narrowtube.graph import stickiness_alpha

_SERIES_TOL = 1e-14
_SERIES_TERMS = 200


def interval_exit_time(a, L):
    """Mean exit time of (0, L) from a, both ends absorbing: a(L-a)/2."""
    if not 0.0 <= a <= L:
        raise ValueError("start outside the interval")
    return a * (L - a) / 2.0


def interval_exit_prob_right(a, L):
    """Probability of exiting at L before 0, starting from a: a/L."""
    if not 0.0 <= a <= L:
        raise ValueError("start outside the interval")
    return a / L


def neck_profile(x, M, kappa):
    """-x^2/2 + (M - kappa) x on [0, M]: mean time spent left of the shell.

    Solves f'' = -1, f(0) = 0, f'(M) = -kappa; at x = M the value is
    M^2/2 - kappa*M.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < -1e-12) or np.any(x > M + 1e-12):
        raise ValueError("x outside [0, M]")
    return -0.5 * x * x + (M - kappa) * x


def compatibility_kappa(d, rho, r, eps, lams):
    """Leading-order flux-balance constant: kappa = -alpha(eps).

    alpha(eps) = (rho*r)^d V_d / (sum lambda^(d-1) eps^(d-1) V_{d-1}); the
    o(1) correction is dropped, which the tolerance budgets absorb.
    """
    return -stickiness_alpha(d, rho * r, eps, lams)


def occupation_time_slab(start_x, slab, L, bc="dd"):
    """Expected time in [a, b] before leaving (0, L), started at start_x.

    Solves f'' = -1_[a,b], f(0) = 0 and either f(L) = 0 (bc="dd") or
    f'(L) = 0 (bc="dn"). Piecewise quadratic, evaluated exactly.
    """
    a, b = slab
    if not (0.0 <= a <= b <= L):
        raise ValueError("slab must satisfy 0 <= a <= b <= L")
    if bc not in ("dd", "dn"):
        raise ValueError("bc must be 'dd' or 'dn'")
    if not 0.0 <= start_x <= L:
        raise ValueError("start outside the interval")

    def ramp_integral(x):
        # integral from 0 to x of (clip(t,a,b) - a) dt
        if x <= a:
            return 0.0
        if x <= b:
            return 0.5 * (x - a) ** 2
        return 0.5 * (b - a) ** 2 + (b - a) * (x - b)

    if bc == "dn":
        c = b - a
    else:
        c = ramp_integral(L) / L
    return c * start_x - ramp_integral(start_x)


def survival_prob_one_cycle(delta_p, delta, m):
    """One-cycle survival of the killed shell chain.

    delta'/(2 delta' - m) + ((delta' - m)/(2 delta' - m)) *
    ((delta - 2 delta')/(delta - delta')), valid for m < delta' and
    2 delta' < delta. Independent of the start on the shell.
    """
    if not (0.0 <= m < delta_p and 2.0 * delta_p < delta):
        raise ValueError("need m < delta' and 2 delta' < delta")
    inner = delta_p / (2.0 * delta_p - m)
    outer = (delta_p - m) / (2.0 * delta_p - m)
    return inner + outer * (delta - 2.0 * delta_p) / (delta - delta_p)


def hitting_tail_bound(delta_p, t):
    """Mill-ratio bound on reaching distance delta' within time t."""
    if delta_p <= 0 or t <= 0:
        raise ValueError("delta' and t must be positive")
    val = (2.0 * math.sqrt(2.0 * t) / (delta_p * math.sqrt(math.pi))) \
        * math.exp(-delta_p**2 / (2.0 * t))
    return min(1.0, val)


def ergodicity_series(r, t, n_terms=_SERIES_TERMS):
    """F(r, t, 0) = sum_n exp(-(pi^2/(8 r^2)) (2n+1)^2 t) 4(-1)^n/(pi(2n+1)).

    Alternating, so the truncation error is below the first omitted term;
    stop early once that falls under 1e-14. Clipped to [0, 1].
    """
    if r <= 0 or t < 0:
        raise ValueError("need r > 0 and t >= 0")
    rate = math.pi**2 * t / (8.0 * r * r)
    total = 0.0
    for n in range(n_terms):
        q = 2 * n + 1
        term = math.exp(-rate * q * q) * 4.0 * (-1.0) ** n / (math.pi * q)
        total += term
        if abs(term) < _SERIES_TOL:
            break
    return min(1.0, max(0.0, total))


def interval_exit_survival(t, a):
    """P(T > t) for the exit time T of (-a, a) from the center, var-2 clock.

    Equals the ergodicity series at doubled time: the var-2 process runs the
    var-1 clock twice as fast.
    """
    return ergodicity_series(a, 2.0 * t)


def mean_interval_exit_center(a):
    """E T for the exit of (-a, a) from 0 in the var-2 clock: a^2/2."""
    return a * a / 2.0


def sample_interval_exit(rng, a, n):
    """Inversion sampling of the centered interval-exit time, var-2 clock.

    For each uniform u the equation P(T > t) = u is solved by brentq on a
    bracket built from the one-term upper bound (Leibniz: the first series
    term dominates the sum from above).
    """
    if a <= 0:
        raise ValueError("a must be positive")
    us = rng.random(n)
    out = np.empty(n)
    scale = a * a
    for i, u in enumerate(us):
        # S(t_hi) <= (4/pi) exp(-pi^2 t_hi/(4 a^2)) = u  => g(t_hi) <= 0
        u = max(u, 1e-300)
        t_hi = 4.0 * scale / math.pi**2 * math.log(4.0 / (math.pi * u))
        t_lo = 1e-14 * scale
        g = lambda t: interval_exit_survival(t, a) - u
        if g(t_lo) <= 0.0:
            out[i] = t_lo
            continue
        # rounding can leave g(t_hi) a few ulps above zero at the root
        while g(t_hi) > 0.0:
            t_hi *= 2.0
        out[i] = brentq(g, t_lo, t_hi, xtol=1e-14 * scale, rtol=8.9e-16)
    return out


def sample_holding_time(rng, alpha, delta_sim, n):
    """Sticky-vertex holding times: E1 * (alpha delta_sim) + interval exit.

    Mean is exactly delta_sim^2/2 + alpha delta_sim. The exponential stage
    models the ball-level escape; the interval stage is the diffusive travel
    from the vertex to graph distance delta_sim.
    """
    expo = rng.standard_exponential(n) * (alpha * delta_sim)
    return expo + sample_interval_exit(rng, delta_sim, n)
