"""Reflected Brownian motion with generator 2*(1/2)Delta = Delta in a tube.

Proposals are Gaussian with per-coordinate variance 2h; boundary handling is
specular reflection across the tangent plane at the bisected crossing point,
with a project-inward fallback after an iteration cap. First hits of shell
level sets are sharpened by a Brownian-bridge crossing test whenever a step
stays inside a straight cylinder section.

Randomness is counter-based (Philox4x32-10): the stream is keyed by
(seed, path index) and indexed by the proposal counter, so results are a
deterministic multiset regardless of scheduling or batch splits.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from narrowtube.graph import GraphPoint
from narrowtube.tube import ShellSpec, TubeDomain

_M32 = np.uint64(0xFFFFFFFF)
_PH_M0 = np.uint64(0xD2511F53)
_PH_M1 = np.uint64(0xCD9E8D57)
_PH_W0 = np.uint64(0x9E3779B9)
_PH_W1 = np.uint64(0xBB67AE85)
_SH32 = np.uint64(32)
_KEY_TWEAK = np.uint64(0x5851F42D)
_INV32 = 2.3283064365386963e-10
_TWO_PI = 6.283185307179586

_USE_NUMBA = os.environ.get("NARROWTUBE_NO_NUMBA", "") == ""
if _USE_NUMBA:
    try:
        import numba
        from numba import njit
    except ImportError:  # pragma: no cover
        _USE_NUMBA = False

if not _USE_NUMBA:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


@dataclass
class SimConfig:
    """Step-size and reproducibility policy for one simulation run."""

    h: float
    seed: int = 0
    max_steps: int = 10**9
    bridge_correction: bool = True
    substep_factor: int = 16
    max_reflections: int = 8

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.substep_factor < 1:
            raise ValueError("substep_factor must be >= 1")

    def validate_for(self, dom: TubeDomain):
        if math.sqrt(2.0 * self.h) > dom.epsilon / 4.0 + 1e-15:
            raise ValueError(
                f"step too coarse: sqrt(2h)={math.sqrt(2 * self.h):.3e} "
                f"exceeds eps/4={dom.epsilon / 4:.3e}"
            )


def default_step(epsilon):
    """h with sqrt(2h) = eps/8, the default resolution policy."""
    return epsilon * epsilon / 128.0


@dataclass(frozen=True)
class PathState:
    z: np.ndarray
    t: float
    stream: int
    counter: int = 0


@dataclass(frozen=True)
class ShellTarget:
    """Stop when the projected graph distance from `vertex` reaches `hi`;
    optionally also when it falls to `lo` (two-sided excursion runs)."""

    vertex: int
    hi: float
    lo: float | None = None


@dataclass
class ExitRecord:
    start: np.ndarray
    sigma: float
    location: np.ndarray
    vertex: int
    edge: int | None
    code: str  # "hi", "lo", "timeout", "invalid"
    steps: int
    fallbacks: int
    path_id: int


# --- Philox4x32-10, on uint64 scalars holding 32-bit lanes ---

@njit(cache=True, inline="always")
def _philox4(k0, k1, c0, c1, c2, c3):
    for _ in range(10):
        p0 = _PH_M0 * c0
        p1 = _PH_M1 * c2
        hi0 = p0 >> _SH32
        lo0 = p0 & _M32
        hi1 = p1 >> _SH32
        lo1 = p1 & _M32
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + _PH_W0) & _M32
        k1 = (k1 + _PH_W1) & _M32
    return c0, c1, c2, c3


@njit(cache=True, inline="always")
def _gauss_pair(x0, x1):
    u1 = (float(x0) + 0.5) * _INV32
    u2 = (float(x1) + 0.5) * _INV32
    r = math.sqrt(-2.0 * math.log(u1))
    return r * math.cos(_TWO_PI * u2), r * math.sin(_TWO_PI * u2)


@njit(cache=True, inline="always")
def _draw(seed_lo, seed_hi, pid_lo, pid_hi, counter, xi):
    """Fill xi (length d) with standard normals; return a spare uniform."""
    d = xi.shape[0]
    cu = np.uint64(counter)
    c0 = cu & _M32
    c1 = (cu >> _SH32) & _M32
    x0, x1, x2, _x3 = _philox4(seed_lo, seed_hi, c0, c1, pid_lo, pid_hi)
    g0, g1 = _gauss_pair(x0, x1)
    xi[0] = g0
    if d >= 2:
        xi[1] = g1
    if d == 2:
        return (float(x2) + 0.5) * _INV32
    y0, y1, y2, _y3 = _philox4(
        (seed_lo ^ _KEY_TWEAK) & _M32, seed_hi, c0, c1, pid_lo, pid_hi
    )
    g2, _g3 = _gauss_pair(y0, y1)
    xi[2] = g2
    return (float(y2) + 0.5) * _INV32


# --- membership and normals against the packed geometry ---

@njit(cache=True)
def _inside(z, verts, R, A, U, L, lamr,
            fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks, fil_coefs):
    d = z.shape[0]
    ne = A.shape[0]
    for k in range(ne):
        ax = 0.0
        ww = 0.0
        for c in range(d):
            w = z[c] - A[k, c]
            ax += w * U[k, c]
            ww += w * w
        if 0.0 <= ax <= L[k]:
            t2 = ww - ax * ax
            if t2 <= lamr[k] * lamr[k]:
                return True
    nv = verts.shape[0]
    for j in range(nv):
        s = 0.0
        for c in range(d):
            w = z[c] - verts[j, c]
            s += w * w
        if s <= R[j] * R[j]:
            return True
    nf = fil_edge.shape[0]
    for i in range(nf):
        k = fil_edge[i]
        ax = 0.0
        ww = 0.0
        for c in range(d):
            w = z[c] - A[k, c]
            ax += w * U[k, c]
            ww += w * w
        ax_t = ax
        if fil_end[i] == 1:
            ax = L[k] - ax
        if fil_x0[i] <= ax <= fil_x1[i]:
            t2 = ww - ax_t * ax_t
            rr = _fillet_val(i, ax, fil_nb, fil_breaks, fil_coefs)
            if t2 <= rr * rr:
                return True
    return False


@njit(cache=True, inline="always")
def _fillet_val(i, x, fil_nb, fil_breaks, fil_coefs):
    p = 0
    if fil_nb[i] == 2 and x > fil_breaks[i, 1]:
        p = 1
    u = x - fil_breaks[i, p]
    v = 0.0
    for q in range(5, -1, -1):
        v = v * u + fil_coefs[i, p, q]
    return v


@njit(cache=True, inline="always")
def _fillet_der(i, x, fil_nb, fil_breaks, fil_coefs):
    p = 0
    if fil_nb[i] == 2 and x > fil_breaks[i, 1]:
        p = 1
    u = x - fil_breaks[i, p]
    v = 0.0
    for q in range(5, 0, -1):
        v = v * u + q * fil_coefs[i, p, q]
    return v


@njit(cache=True)
def _normal_at(zb, zo, nrm, verts, R, A, U, L, lamr,
               fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
               fil_coefs):
    """Inward normal at a bisected crossing: find a piece containing zb but
    not zo, take its surface normal, and verify by probing. Returns True on
    success, filling nrm."""
    d = zb.shape[0]
    probe = 1e-9
    nv = verts.shape[0]
    for j in range(nv):
        si = 0.0
        so = 0.0
        for c in range(d):
            si += (zb[c] - verts[j, c]) ** 2
            so += (zo[c] - verts[j, c]) ** 2
        if si <= R[j] * R[j] < so:
            nn = math.sqrt(si)
            if nn > 0:
                for c in range(d):
                    nrm[c] = (verts[j, c] - zb[c]) / nn
                if _probe_ok(zb, nrm, probe, verts, R, A, U, L, lamr,
                             fil_edge, fil_end, fil_x0, fil_x1, fil_nb,
                             fil_breaks, fil_coefs):
                    return True
    ne = A.shape[0]
    for k in range(ne):
        axi = 0.0
        wwi = 0.0
        axo = 0.0
        wwo = 0.0
        for c in range(d):
            wi = zb[c] - A[k, c]
            wo = zo[c] - A[k, c]
            axi += wi * U[k, c]
            wwi += wi * wi
            axo += wo * U[k, c]
            wwo += wo * wo
        in_i = (0.0 <= axi <= L[k]) and (wwi - axi * axi <= lamr[k] * lamr[k])
        in_o = (0.0 <= axo <= L[k]) and (wwo - axo * axo <= lamr[k] * lamr[k])
        if in_i and not in_o:
            tr = math.sqrt(max(wwi - axi * axi, 0.0))
            if tr > 0:
                for c in range(d):
                    nrm[c] = -(zb[c] - A[k, c] - axi * U[k, c]) / tr
                if _probe_ok(zb, nrm, probe, verts, R, A, U, L, lamr,
                             fil_edge, fil_end, fil_x0, fil_x1, fil_nb,
                             fil_breaks, fil_coefs):
                    return True
    nf = fil_edge.shape[0]
    for i in range(nf):
        k = fil_edge[i]
        axi = 0.0
        wwi = 0.0
        axo = 0.0
        wwo = 0.0
        for c in range(d):
            wi = zb[c] - A[k, c]
            wo = zo[c] - A[k, c]
            axi += wi * U[k, c]
            wwi += wi * wi
            axo += wo * U[k, c]
            wwo += wo * wo
        sgn = 1.0
        if fil_end[i] == 1:
            axi_v = L[k] - axi
            axo_v = L[k] - axo
            sgn = -1.0
        else:
            axi_v = axi
            axo_v = axo
        in_i = False
        in_o = False
        if fil_x0[i] <= axi_v <= fil_x1[i]:
            rr = _fillet_val(i, axi_v, fil_nb, fil_breaks, fil_coefs)
            in_i = wwi - axi * axi <= rr * rr
        if fil_x0[i] <= axo_v <= fil_x1[i]:
            rr = _fillet_val(i, axo_v, fil_nb, fil_breaks, fil_coefs)
            in_o = wwo - axo * axo <= rr * rr
        if in_i and not in_o:
            tr = math.sqrt(max(wwi - axi * axi, 0.0))
            if tr > 0:
                dp = _fillet_der(i, axi_v, fil_nb, fil_breaks, fil_coefs)
                slope = math.sqrt(1.0 + dp * dp)
                for c in range(d):
                    trc = (zb[c] - A[k, c] - axi * U[k, c]) / tr
                    nrm[c] = (dp * sgn * U[k, c] - trc) / slope
                if _probe_ok(zb, nrm, probe, verts, R, A, U, L, lamr,
                             fil_edge, fil_end, fil_x0, fil_x1, fil_nb,
                             fil_breaks, fil_coefs):
                    return True
    return False


@njit(cache=True)
def _probe_ok(zb, nrm, probe, verts, R, A, U, L, lamr,
              fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
              fil_coefs):
    d = zb.shape[0]
    zp = np.empty(d)
    for c in range(d):
        zp[c] = zb[c] + probe * nrm[c]
    if not _inside(zp, verts, R, A, U, L, lamr, fil_edge, fil_end,
                   fil_x0, fil_x1, fil_nb, fil_breaks, fil_coefs):
        return False
    for c in range(d):
        zp[c] = zb[c] - probe * nrm[c]
    if _inside(zp, verts, R, A, U, L, lamr, fil_edge, fil_end,
               fil_x0, fil_x1, fil_nb, fil_breaks, fil_coefs):
        return False
    return True


@njit(cache=True, inline="always")
def _reflect_cylinder(z, w, k, max_reflections, A, U, lamr):
    """Specular wall reflections inside one straight cylinder section.

    Valid when the whole step keeps its axial coordinate inside the pure
    cylinder zone of edge k: every boundary contact is then this edge's
    wall, whose crossing point solves a quadratic exactly. Axial components
    are untouched by wall reflections.
    """
    d = z.shape[0]
    r2 = lamr[k] * lamr[k]
    nref = 0
    for _ in range(max_reflections):
        axw = 0.0
        ww = 0.0
        for c in range(d):
            v = w[c] - A[k, c]
            axw += v * U[k, c]
            ww += v * v
        if ww - axw * axw <= r2:
            for c in range(d):
                z[c] = w[c]
            return nref, 0, True
        # transverse quadratic |p_t + t q_t|^2 = r^2 from the current point
        a = 0.0
        b = 0.0
        cc = 0.0
        axz = 0.0
        for c in range(d):
            v = z[c] - A[k, c]
            axz += v * U[k, c]
        for c in range(d):
            pt = (z[c] - A[k, c]) - axz * U[k, c]
            qt = (w[c] - z[c]) - (axw - axz) * U[k, c]
            a += qt * qt
            b += pt * qt
            cc += pt * pt - 0.0
        cc -= r2
        disc = b * b - a * cc
        if a <= 0.0 or disc < 0.0:
            return nref, 1, False
        t = (-b + math.sqrt(disc)) / a
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        # hit point and inward normal (toward the axis)
        dot = 0.0
        for c in range(d):
            hit = z[c] + t * (w[c] - z[c])
            z[c] = hit
        axh = 0.0
        for c in range(d):
            axh += (z[c] - A[k, c]) * U[k, c]
        nn = 0.0
        for c in range(d):
            tr = (z[c] - A[k, c]) - axh * U[k, c]
            nn += tr * tr
        nn = math.sqrt(nn)
        if nn <= 0.0:
            return nref, 1, False
        nref += 1
        dot = 0.0
        for c in range(d):
            tr = ((z[c] - A[k, c]) - axh * U[k, c]) / nn
            dot += (w[c] - z[c]) * tr
        for c in range(d):
            tr = ((z[c] - A[k, c]) - axh * U[k, c]) / nn
            w[c] = w[c] - 2.0 * dot * tr
    return nref, 1, False


@njit(cache=True, inline="always")
def _reflect_ball(z, w, v, scratch, max_reflections, verts, R, A, U, L,
                  fil_edge, fil_end, fil_x0):
    """Specular wall reflections inside one junction ball.

    Valid while every sphere contact stays clear of every fillet mouth
    span; bails out without touching z or w otherwise so the generic
    path can finish the step from the current state.
    """
    d = z.shape[0]
    nf = fil_edge.shape[0]
    r2 = R[v] * R[v]
    nref = 0
    for _ in range(max_reflections):
        dw = 0.0
        for c in range(d):
            t = w[c] - verts[v, c]
            dw += t * t
        if dw <= r2:
            for c in range(d):
                z[c] = w[c]
            return nref, True
        a = 0.0
        b = 0.0
        cc = 0.0
        for c in range(d):
            p = z[c] - verts[v, c]
            q = w[c] - z[c]
            a += q * q
            b += p * q
            cc += p * p
        cc -= r2
        disc = b * b - a * cc
        if a <= 0.0 or disc < 0.0:
            return nref, False
        t = (-b + math.sqrt(disc)) / a
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        for c in range(d):
            scratch[c] = z[c] + t * (w[c] - z[c])
        for f in range(nf):
            k = fil_edge[f]
            ax = 0.0
            for c in range(d):
                ax += (scratch[c] - A[k, c]) * U[k, c]
            if fil_end[f] == 1:
                ax = L[k] - ax
            if ax >= fil_x0[f]:
                return nref, False
        nn = 0.0
        for c in range(d):
            z[c] = scratch[c]
            t = z[c] - verts[v, c]
            nn += t * t
        nn = math.sqrt(nn)
        if nn <= 0.0:
            return nref, False
        nref += 1
        dot = 0.0
        for c in range(d):
            dot += (w[c] - z[c]) * (z[c] - verts[v, c])
        dot /= nn * nn
        for c in range(d):
            w[c] = w[c] - 2.0 * dot * (z[c] - verts[v, c])
    return nref, False


@njit(cache=True)
def _reflect_step(z, w, scratch_a, scratch_b, scratch_n, max_reflections,
                  verts, R, A, U, L, lamr, zone_lo, zone_hi,
                  fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
                  fil_coefs):
    """Advance z to the reflected endpoint of the proposal w.

    Returns (n_reflections, fallback_flag, ok_flag). Steps confined to a
    straight cylinder section reflect analytically; everything else goes
    through bisection plus specular reflection at the bisected point, with
    a place-at-last-interior-point fallback after the iteration cap.
    """
    d = z.shape[0]
    ne = A.shape[0]
    # analytic lane: both endpoints' axial inside one pure cylinder zone
    for k in range(ne):
        axz = 0.0
        axw = 0.0
        wwz = 0.0
        for c in range(d):
            vz = z[c] - A[k, c]
            vw = w[c] - A[k, c]
            axz += vz * U[k, c]
            axw += vw * U[k, c]
            wwz += vz * vz
        if (zone_lo[k] <= axz <= zone_hi[k]
                and zone_lo[k] <= axw <= zone_hi[k]
                and wwz - axz * axz <= lamr[k] * lamr[k]):
            nref, fb, ok = _reflect_cylinder(z, w, k, max_reflections,
                                             A, U, lamr)
            if ok:
                return nref, fb, True
            break
    # analytic lane: starting point inside a junction ball
    nv = verts.shape[0]
    for v in range(nv):
        dz = 0.0
        for c in range(d):
            t = z[c] - verts[v, c]
            dz += t * t
        if dz <= R[v] * R[v]:
            nref, ok = _reflect_ball(z, w, v, scratch_n, max_reflections,
                                     verts, R, A, U, L, fil_edge, fil_end,
                                     fil_x0)
            if ok:
                return nref, 0, True
            break
    if _inside(w, verts, R, A, U, L, lamr, fil_edge, fil_end, fil_x0,
               fil_x1, fil_nb, fil_breaks, fil_coefs):
        for c in range(d):
            z[c] = w[c]
        return 0, 0, True
    p0 = scratch_a
    p1 = scratch_b
    for c in range(d):
        p0[c] = z[c]
        p1[c] = w[c]
    nref = 0
    for _ in range(max_reflections):
        # bisect [p0 inside, p1 outside] down to ~4e-9 of segment length
        for _ in range(28):
            moved = False
            for c in range(d):
                m = 0.5 * (p0[c] + p1[c])
                if m != p0[c] and m != p1[c]:
                    moved = True
                scratch_n[c] = m
            if not moved:
                break
            if _inside(scratch_n, verts, R, A, U, L, lamr, fil_edge,
                       fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
                       fil_coefs):
                for c in range(d):
                    p0[c] = scratch_n[c]
            else:
                for c in range(d):
                    p1[c] = scratch_n[c]
        ok = _normal_at(p0, p1, scratch_n, verts, R, A, U, L, lamr,
                        fil_edge, fil_end, fil_x0, fil_x1, fil_nb,
                        fil_breaks, fil_coefs)
        if not ok:
            for c in range(d):
                z[c] = p0[c]
            return nref, 1, True
        nref += 1
        dot = 0.0
        for c in range(d):
            dot += (w[c] - p0[c]) * scratch_n[c]
        for c in range(d):
            w[c] = w[c] - 2.0 * dot * scratch_n[c]
        if _inside(w, verts, R, A, U, L, lamr, fil_edge, fil_end, fil_x0,
                   fil_x1, fil_nb, fil_breaks, fil_coefs):
            for c in range(d):
                z[c] = w[c]
            return nref, 0, True
        for c in range(d):
            p1[c] = w[c]
    for c in range(d):
        z[c] = p0[c]
    return nref, 1, True


@njit(cache=True, inline="always")
def _edge_dist(z, k, sign, A, U, L):
    """Axial coordinate of z on edge k measured from the monitored end."""
    d = z.shape[0]
    ax = 0.0
    for c in range(d):
        ax += (z[c] - A[k, c]) * U[k, c]
    return ax if sign > 0 else L[k] - ax


@njit(cache=True)
def _run_to_levels(z0s, t0s, path_ids, seed_lo, seed_hi,
                   verts, R, A, U, L, lamr, zone_lo, zone_hi,
                   fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
                   fil_coefs,
                   mon_edges, mon_sign,
                   hi_level, lo_level, lo_enabled,
                   h, substep_factor, bridge, max_reflections, max_steps,
                   out_z, out_t, out_code, out_edge, out_steps,
                   out_fallbacks):
    """Run each path until its projected distance from the monitored vertex
    crosses hi_level (code 1) or, when enabled, lo_level (code 2).

    The distance is max over incident edges of the oriented axial
    coordinate, clipped at 0; it equals d(Pi(z), O_j) throughout the
    monitored neighborhood. Crossings are placed on the level surface by
    axial snapping; time gets the interpolated fraction of the step.
    """
    n = z0s.shape[0]
    d = z0s.shape[1]
    ne = A.shape[0]
    nv = verts.shape[0]
    nmon = mon_edges.shape[0]
    near_band = 4.0 * math.sqrt(2.0 * h)
    h_sub = h / substep_factor
    s_prev = np.empty(nmon)
    s_new = np.empty(nmon)
    z = np.empty(d)
    w = np.empty(d)
    sa = np.empty(d)
    sb = np.empty(d)
    sn = np.empty(d)
    xi = np.empty(d)
    for i in range(n):
        for c in range(d):
            z[c] = z0s[i, c]
        t = t0s[i]
        pid = np.uint64(path_ids[i])
        pid_lo = pid & _M32
        pid_hi = (pid >> _SH32) & _M32
        counter = 0
        fallbacks = 0
        code = 0
        exit_m = -1
        steps = 0
        dist = 0.0
        arg = 0
        for m in range(nmon):
            s_prev[m] = _edge_dist(z, mon_edges[m], mon_sign[m], A, U, L)
            if s_prev[m] > dist:
                dist = s_prev[m]
                arg = m
        if dist >= hi_level:
            code = 1
            exit_m = arg
        elif lo_enabled and dist <= lo_level:
            code = 2
            exit_m = arg
        while code == 0 and steps < max_steps:
            gap = hi_level - dist
            if lo_enabled and dist - lo_level < gap:
                gap = dist - lo_level
            h_eff = h_sub if gap < near_band else h
            scale = math.sqrt(2.0 * h_eff)
            u_spare = _draw(seed_lo, seed_hi, pid_lo, pid_hi, counter, xi)
            counter += 1
            for c in range(d):
                w[c] = z[c] + scale * xi[c]
            # fast lanes inline: helper calls cost NRT refcount traffic per
            # array argument, so steps that stay inside one cylinder zone or
            # one ball must not leave this function
            nref = 0
            handled = False
            for k in range(ne):
                axz = 0.0
                axw = 0.0
                wwz = 0.0
                www = 0.0
                for c in range(d):
                    vz = z[c] - A[k, c]
                    vw = w[c] - A[k, c]
                    axz += vz * U[k, c]
                    axw += vw * U[k, c]
                    wwz += vz * vz
                    www += vw * vw
                if (zone_lo[k] <= axz <= zone_hi[k]
                        and zone_lo[k] <= axw <= zone_hi[k]
                        and wwz - axz * axz <= lamr[k] * lamr[k]):
                    if www - axw * axw <= lamr[k] * lamr[k]:
                        for c in range(d):
                            z[c] = w[c]
                        handled = True
                    else:
                        nref, _fbc, handled = _reflect_cylinder(
                            z, w, k, max_reflections, A, U, lamr)
                    break
            if not handled:
                for v in range(nv):
                    dzv = 0.0
                    dwv = 0.0
                    for c in range(d):
                        tz = z[c] - verts[v, c]
                        tw = w[c] - verts[v, c]
                        dzv += tz * tz
                        dwv += tw * tw
                    if dzv <= R[v] * R[v]:
                        if dwv <= R[v] * R[v]:
                            for c in range(d):
                                z[c] = w[c]
                            handled = True
                        else:
                            nrb, handled = _reflect_ball(
                                z, w, v, sn, max_reflections, verts, R,
                                A, U, L, fil_edge, fil_end, fil_x0)
                            nref += nrb
                        break
            if not handled:
                nrg, fb, _okf = _reflect_step(
                    z, w, sa, sb, sn, max_reflections,
                    verts, R, A, U, L, lamr, zone_lo, zone_hi,
                    fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
                    fil_coefs)
                nref += nrg
                fallbacks += fb
            steps += 1
            dist_new = 0.0
            arg_new = 0
            for m in range(nmon):
                s_new[m] = _edge_dist(z, mon_edges[m], mon_sign[m], A, U, L)
                if s_new[m] > dist_new:
                    dist_new = s_new[m]
                    arg_new = m
            if dist_new >= hi_level:
                m = arg_new
                s0 = s_prev[m]
                s1 = s_new[m]
                theta = (hi_level - s0) / (s1 - s0) if s1 > s0 else 1.0
                t += theta * h_eff
                code = 1
                exit_m = m
                break
            if lo_enabled and dist_new <= lo_level:
                m = arg
                s0 = s_prev[m]
                s1 = s_new[m]
                theta = (s0 - lo_level) / (s0 - s1) if s0 > s1 else 1.0
                t += theta * h_eff
                code = 2
                exit_m = m
                break
            if bridge and nref == 0:
                m = arg_new
                k = mon_edges[m]
                s0 = s_prev[m]
                s1 = s_new[m]
                a0 = s0 if mon_sign[m] > 0 else L[k] - s0
                a1 = s1 if mon_sign[m] > 0 else L[k] - s1
                if (zone_lo[k] <= a0 <= zone_hi[k]
                        and zone_lo[k] <= a1 <= zone_hi[k]):
                    p_hi = math.exp(-(hi_level - s0) * (hi_level - s1)
                                    / h_eff)
                    p_lo = 0.0
                    if lo_enabled and s0 > lo_level and s1 > lo_level:
                        p_lo = math.exp(-(s0 - lo_level) * (s1 - lo_level)
                                        / h_eff)
                    if u_spare < p_hi:
                        theta = (hi_level - s0) / (
                            (hi_level - s0) + (hi_level - s1))
                        t += theta * h_eff
                        code = 1
                        exit_m = m
                        break
                    if p_lo > 0.0 and u_spare > 1.0 - p_lo:
                        theta = (s0 - lo_level) / (
                            (s0 - lo_level) + (s1 - lo_level))
                        t += theta * h_eff
                        code = 2
                        exit_m = m
                        break
            t += h_eff
            dist = dist_new
            arg = arg_new
            for m in range(nmon):
                s_prev[m] = s_new[m]
        if code != 0:
            m = exit_m
            k = mon_edges[m]
            level = hi_level if code == 1 else lo_level
            sfix = _edge_dist(z, k, mon_sign[m], A, U, L)
            for c in range(d):
                out_z[i, c] = z[c] + (level - sfix) * U[k, c] * mon_sign[m]
        else:
            for c in range(d):
                out_z[i, c] = z[c]
        out_t[i] = t
        out_code[i] = code
        out_edge[i] = mon_edges[exit_m] if exit_m >= 0 else -1
        out_steps[i] = steps
        out_fallbacks[i] = fallbacks
    return 0


@njit(cache=True)
def _run_occupation(z0, seed_lo, seed_hi, pid,
                    verts, R, A, U, L, lamr, zone_lo, zone_hi,
                    fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
                    fil_coefs,
                    ball_vertex, slab_edge, slab_a, slab_b,
                    h, max_reflections, n_steps, out):
    """One long unabsorbed path; accumulates time spent in the vertex ball
    and in the axial slab of one edge. out = [t_ball, t_slab, t_total,
    fallbacks, reflections]."""
    d = z0.shape[0]
    z = np.empty(d)
    w = np.empty(d)
    sa = np.empty(d)
    sb = np.empty(d)
    sn = np.empty(d)
    xi = np.empty(d)
    for c in range(d):
        z[c] = z0[c]
    pidu = np.uint64(pid)
    pid_lo = pidu & _M32
    pid_hi = (pidu >> _SH32) & _M32
    scale = math.sqrt(2.0 * h)
    t_ball = 0.0
    t_slab = 0.0
    fallbacks = 0
    refl = 0
    R2 = R[ball_vertex] * R[ball_vertex]
    r2 = lamr[slab_edge] * lamr[slab_edge]
    ne = A.shape[0]
    nv = verts.shape[0]
    for step in range(n_steps):
        _draw(seed_lo, seed_hi, pid_lo, pid_hi, step, xi)
        for c in range(d):
            w[c] = z[c] + scale * xi[c]
        # fast lanes inline, as in _run_to_levels
        nref = 0
        handled = False
        for k in range(ne):
            axz = 0.0
            axw = 0.0
            wwz = 0.0
            www = 0.0
            for c in range(d):
                vz = z[c] - A[k, c]
                vw = w[c] - A[k, c]
                axz += vz * U[k, c]
                axw += vw * U[k, c]
                wwz += vz * vz
                www += vw * vw
            if (zone_lo[k] <= axz <= zone_hi[k]
                    and zone_lo[k] <= axw <= zone_hi[k]
                    and wwz - axz * axz <= lamr[k] * lamr[k]):
                if www - axw * axw <= lamr[k] * lamr[k]:
                    for c in range(d):
                        z[c] = w[c]
                    handled = True
                else:
                    nref, _fbc, handled = _reflect_cylinder(
                        z, w, k, max_reflections, A, U, lamr)
                break
        if not handled:
            for v in range(nv):
                dzv = 0.0
                dwv = 0.0
                for c in range(d):
                    tz = z[c] - verts[v, c]
                    tw = w[c] - verts[v, c]
                    dzv += tz * tz
                    dwv += tw * tw
                if dzv <= R[v] * R[v]:
                    if dwv <= R[v] * R[v]:
                        for c in range(d):
                            z[c] = w[c]
                        handled = True
                    else:
                        nrb, handled = _reflect_ball(
                            z, w, v, sn, max_reflections, verts, R,
                            A, U, L, fil_edge, fil_end, fil_x0)
                        nref += nrb
                    break
        if not handled:
            nrg, fb, _okf = _reflect_step(
                z, w, sa, sb, sn, max_reflections,
                verts, R, A, U, L, lamr, zone_lo, zone_hi,
                fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
                fil_coefs)
            nref += nrg
            fallbacks += fb
        refl += nref
        s = 0.0
        for c in range(d):
            dv = z[c] - verts[ball_vertex, c]
            s += dv * dv
        if s <= R2:
            t_ball += h
        else:
            ax = 0.0
            ww = 0.0
            for c in range(d):
                dv = z[c] - A[slab_edge, c]
                ax += dv * U[slab_edge, c]
                ww += dv * dv
            if slab_a <= ax <= slab_b and ww - ax * ax <= r2:
                t_slab += h
    out[0] = t_ball
    out[1] = t_slab
    out[2] = n_steps * h
    out[3] = fallbacks
    out[4] = refl
    return 0


@njit(cache=True)
def _run_to_time(z0s, path_ids, seed_lo, seed_hi,
                 verts, R, A, U, L, lamr, zone_lo, zone_hi,
                 fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
                 fil_coefs,
                 T, h, max_reflections, out_z, out_fallbacks):
    """Advance each path to exactly time T; the last step is shortened."""
    n = z0s.shape[0]
    d = z0s.shape[1]
    ne = A.shape[0]
    nv = verts.shape[0]
    z = np.empty(d)
    w = np.empty(d)
    sa = np.empty(d)
    sb = np.empty(d)
    sn = np.empty(d)
    xi = np.empty(d)
    for i in range(n):
        for c in range(d):
            z[c] = z0s[i, c]
        pid = np.uint64(path_ids[i])
        pid_lo = pid & _M32
        pid_hi = (pid >> _SH32) & _M32
        counter = 0
        fallbacks = 0
        t = 0.0
        while t < T:
            h_eff = h if t + h <= T else T - t
            if h_eff <= 0.0:
                break
            scale = math.sqrt(2.0 * h_eff)
            _draw(seed_lo, seed_hi, pid_lo, pid_hi, counter, xi)
            counter += 1
            for c in range(d):
                w[c] = z[c] + scale * xi[c]
            # fast lanes inline, as in _run_to_levels
            handled = False
            for k in range(ne):
                axz = 0.0
                axw = 0.0
                wwz = 0.0
                www = 0.0
                for c in range(d):
                    vz = z[c] - A[k, c]
                    vw = w[c] - A[k, c]
                    axz += vz * U[k, c]
                    axw += vw * U[k, c]
                    wwz += vz * vz
                    www += vw * vw
                if (zone_lo[k] <= axz <= zone_hi[k]
                        and zone_lo[k] <= axw <= zone_hi[k]
                        and wwz - axz * axz <= lamr[k] * lamr[k]):
                    if www - axw * axw <= lamr[k] * lamr[k]:
                        for c in range(d):
                            z[c] = w[c]
                        handled = True
                    else:
                        _nrc, _fbc, handled = _reflect_cylinder(
                            z, w, k, max_reflections, A, U, lamr)
                    break
            if not handled:
                for v in range(nv):
                    dzv = 0.0
                    dwv = 0.0
                    for c in range(d):
                        tz = z[c] - verts[v, c]
                        tw = w[c] - verts[v, c]
                        dzv += tz * tz
                        dwv += tw * tw
                    if dzv <= R[v] * R[v]:
                        if dwv <= R[v] * R[v]:
                            for c in range(d):
                                z[c] = w[c]
                            handled = True
                        else:
                            _nrb, handled = _reflect_ball(
                                z, w, v, sn, max_reflections, verts, R,
                                A, U, L, fil_edge, fil_end, fil_x0)
                        break
            if not handled:
                _nref, fb, _okf = _reflect_step(
                    z, w, sa, sb, sn, max_reflections,
                    verts, R, A, U, L, lamr, zone_lo, zone_hi,
                    fil_edge, fil_end, fil_x0, fil_x1, fil_nb, fil_breaks,
                    fil_coefs)
                fallbacks += fb
            t += h_eff
        for c in range(d):
            out_z[i, c] = z[c]
        out_fallbacks[i] = fallbacks
    return 0


# --- python-side driver API ---

class SimTimeout(RuntimeError):
    """Raised by run_until_hit when max_steps elapse before the target."""

    def __init__(self, elapsed, steps):
        super().__init__(f"no hit after {steps} steps ({elapsed:.4g} time units)")
        self.elapsed = elapsed
        self.steps = steps


def engine_name():
    return "numba" if _USE_NUMBA else "python"


def _py(fn):
    """Pure-python twin of a jitted kernel (same code object)."""
    return getattr(fn, "py_func", fn)


def _geom_tuple(dom: TubeDomain):
    cached = getattr(dom, "_rbm_geom", None)
    if cached is not None:
        return cached
    pack = dom.kernel_pack()
    g = dom.graph
    vids = pack["vids"]
    eids = pack["eids"]
    fil_end = np.array(
        [0 if g.edges[eids[e]].tail == vids[v] else 1
         for v, e in zip(pack["fil_vert"], pack["fil_edge"])],
        dtype=np.int64,
    )
    geom = (
        pack["verts"], pack["R"], pack["A"], pack["U"], pack["L"],
        pack["lamr"], pack["zone_lo"], pack["zone_hi"],
        pack["fil_edge"], fil_end, pack["fil_x0"], pack["fil_x1"],
        pack["fil_nb"], pack["fil_breaks"], pack["fil_coefs"],
    )
    dom._rbm_geom = geom
    return geom


def _monitor_arrays(dom: TubeDomain, vertex):
    pack = dom.kernel_pack()
    g = dom.graph
    eindex = {k: i for i, k in enumerate(pack["eids"])}
    ks = g.incident_edges(vertex)
    mon_edges = np.array([eindex[k] for k in ks], dtype=np.int64)
    mon_sign = np.array(
        [1.0 if g.edges[k].tail == vertex else -1.0 for k in ks])
    return mon_edges, mon_sign


def _split_seed(seed):
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    return s & _M32, (s >> _SH32) & _M32


def batch_exits(dom, starts, target: ShellTarget, cfg: SimConfig,
                path_ids=None, t0s=None, strict_shell=True):
    """Run one path per start row until the target levels; deterministic
    per-path streams keyed by (cfg.seed, path id).

    Returns a list of ExitRecord. Aborts if reflection fallbacks exceed
    1e-6 of all steps (geometry or step size is then unsound).
    """
    cfg.validate_for(dom)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    n = len(starts)
    if n == 0:
        return []
    if strict_shell:
        dom.validate_shell(ShellSpec(vertex=target.vertex, delta=target.hi))
    if path_ids is None:
        path_ids = np.arange(n, dtype=np.int64)
    else:
        path_ids = np.asarray(path_ids, dtype=np.int64)
    if t0s is None:
        t0s = np.zeros(n)
    else:
        t0s = np.asarray(t0s, dtype=float)
    geom = _geom_tuple(dom)
    mon_edges, mon_sign = _monitor_arrays(dom, target.vertex)
    lo_enabled = target.lo is not None
    lo_level = float(target.lo) if lo_enabled else -1.0
    out_z = np.empty_like(starts)
    out_t = np.empty(n)
    out_code = np.empty(n, dtype=np.int64)
    out_edge = np.empty(n, dtype=np.int64)
    out_steps = np.empty(n, dtype=np.int64)
    out_fb = np.empty(n, dtype=np.int64)
    seed_lo, seed_hi = _split_seed(cfg.seed)
    runner = _run_to_levels if _USE_NUMBA else _py(_run_to_levels)
    runner(starts, t0s, path_ids, seed_lo, seed_hi, *geom,
           mon_edges, mon_sign, float(target.hi), lo_level, lo_enabled,
           cfg.h, cfg.substep_factor, cfg.bridge_correction,
           cfg.max_reflections, cfg.max_steps,
           out_z, out_t, out_code, out_edge, out_steps, out_fb)
    total_steps = int(out_steps.sum())
    total_fb = int(out_fb.sum())
    if total_steps > 0 and total_fb > 1e-6 * total_steps:
        raise RuntimeError(
            f"reflection fallback rate {total_fb}/{total_steps} exceeds 1e-6"
        )
    eids = dom.kernel_pack()["eids"]
    codes = {0: "timeout", 1: "hi", 2: "lo"}
    records = []
    for i in range(n):
        records.append(ExitRecord(
            start=starts[i].copy(),
            sigma=float(out_t[i] - t0s[i]),
            location=out_z[i].copy(),
            vertex=target.vertex,
            edge=eids[out_edge[i]] if out_edge[i] >= 0 else None,
            code=codes[int(out_code[i])],
            steps=int(out_steps[i]),
            fallbacks=int(out_fb[i]),
            path_id=int(path_ids[i]),
        ))
    return records


def run_until_hit(dom, z0, target: ShellTarget, cfg: SimConfig, path_id=0,
                  strict_shell=True):
    """Single-path wrapper; raises SimTimeout when max_steps elapse."""
    rec = batch_exits(dom, [z0], target, cfg,
                      path_ids=[path_id], strict_shell=strict_shell)[0]
    if rec.code == "timeout":
        raise SimTimeout(rec.sigma, rec.steps)
    return rec


def step(dom, state: PathState, cfg: SimConfig):
    """Single reference step (python path through the same kernel code)."""
    cfg.validate_for(dom)
    geom = _geom_tuple(dom)
    d = dom.d
    z = np.array(state.z, dtype=float)
    xi = np.empty(d)
    seed_lo, seed_hi = _split_seed(cfg.seed)
    pid = np.uint64(state.stream)
    draw = _draw if _USE_NUMBA else _py(_draw)
    draw(seed_lo, seed_hi, pid & _M32, (pid >> _SH32) & _M32,
         state.counter, xi)
    w = z + math.sqrt(2.0 * cfg.h) * xi
    reflect = _reflect_step if _USE_NUMBA else _py(_reflect_step)
    reflect(z, w, np.empty(d), np.empty(d), np.empty(d),
            cfg.max_reflections, *geom)
    return PathState(z=z, t=state.t + cfg.h, stream=state.stream,
                     counter=state.counter + 1)


def run_occupation(dom, z0, cfg: SimConfig, n_steps, ball_vertex, slab):
    """Long unabsorbed run accumulating time in a vertex ball and in an
    edge slab (edge id, axial window [a, b] from the tail vertex)."""
    cfg.validate_for(dom)
    geom = _geom_tuple(dom)
    pack = dom.kernel_pack()
    vindex = {j: i for i, j in enumerate(pack["vids"])}
    eindex = {k: i for i, k in enumerate(pack["eids"])}
    edge_id, a, b = slab
    out = np.zeros(5)
    seed_lo, seed_hi = _split_seed(cfg.seed)
    runner = _run_occupation if _USE_NUMBA else _py(_run_occupation)
    runner(np.asarray(z0, dtype=float), seed_lo, seed_hi, 0,
           *geom,
           vindex[ball_vertex], eindex[edge_id], float(a), float(b),
           cfg.h, cfg.max_reflections, int(n_steps), out)
    if out[3] > 1e-6 * n_steps:
        raise RuntimeError("reflection fallback rate exceeds 1e-6")
    return {
        "time_in_ball": float(out[0]),
        "time_in_slab": float(out[1]),
        "total_time": float(out[2]),
        "fallbacks": int(out[3]),
        "reflections": int(out[4]),
    }


def run_to_time(dom, starts, T, cfg: SimConfig, path_ids=None):
    """Advance each start to exactly time T; returns final positions."""
    cfg.validate_for(dom)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    n = len(starts)
    if path_ids is None:
        path_ids = np.arange(n, dtype=np.int64)
    else:
        path_ids = np.asarray(path_ids, dtype=np.int64)
    geom = _geom_tuple(dom)
    out_z = np.empty_like(starts)
    out_fb = np.empty(n, dtype=np.int64)
    seed_lo, seed_hi = _split_seed(cfg.seed)
    runner = _run_to_time if _USE_NUMBA else _py(_run_to_time)
    runner(starts, path_ids, seed_lo, seed_hi, *geom,
           float(T), cfg.h, cfg.max_reflections, out_z, out_fb)
    return out_z
