"""Shell-scheme simulator for the limiting diffusion on the metric graph.

Inside an edge the process is Brownian motion with generator d^2/dx^2
(variance 2h per step).  A vertex visit is resolved as one shell event:
an absorbing vertex freezes the path; every other vertex draws the exit
edge from the skew weights, restarts at graph distance delta_sim along
it, and advances the clock by a holding sample whose mean, delta_sim^2/2
plus alpha times delta_sim, matches the limiting vertex occupation.
Degree-one vertices with zero stickiness reflect instead of holding.
Distributional fidelity of the holding law at fixed delta_sim is not
claimed; only the delta_sim -> 0 limit is, so the scheme is validated by
refinement stability and marginal comparisons.

The module also carries the martingale-problem checks used to identify
the limit: a resolvent residual estimator over a cubic test-function
family, and 1-Wasserstein marginal comparisons on the graph metric.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.optimize import linprog

from . import oracle1d
from .graph import GraphPoint

_BLOCK = 256
_Z95 = 1.959963984540054


@dataclass(frozen=True)
class ShellScheme:
    """Discretization policy: shell radius, edge step, vertex parameters.

    gluing maps vertex id to its GluingParams.  The edge step must keep
    one-step displacements below an eighth of the shell radius.
    """

    delta_sim: float
    h_edge: float
    gluing: dict

    def __post_init__(self):
        if self.delta_sim <= 0 or self.h_edge <= 0:
            raise ValueError("delta_sim and h_edge must be positive")
        if math.sqrt(2.0 * self.h_edge) > self.delta_sim / 8.0 + 1e-15:
            raise ValueError(
                f"edge step too coarse: sqrt(2h)="
                f"{math.sqrt(2 * self.h_edge):.3e} exceeds delta_sim/8")

    @classmethod
    def for_graph(cls, graph, delta_sim, h_edge=None):
        """Scheme with the graph's gluing parameters and a default step
        at the resolution cap, sqrt(2 h) = delta_sim / 8."""
        if h_edge is None:
            h_edge = delta_sim * delta_sim / 128.0
        scheme = cls(delta_sim=delta_sim, h_edge=h_edge,
                     gluing={j: graph.gluing_params(j)
                             for j in graph.vertices})
        scheme.validate_for(graph)
        return scheme

    def validate_for(self, graph):
        shortest = min(graph.edge_length(k) for k in graph.edges)
        if self.delta_sim >= shortest / 2.0:
            raise ValueError(
                f"delta_sim={self.delta_sim} must be below half the "
                f"shortest edge length {shortest}")
        missing = set(graph.vertices) - set(self.gluing)
        if missing:
            raise ValueError(f"no gluing parameters for vertices {missing}")


@dataclass
class GraphPath:
    """Sparse record of one trajectory: times, points, and how it ended."""

    times: list
    points: list
    terminal: str  # "horizon" or "absorbed"

    def __post_init__(self):
        for a, b in zip(self.times, self.times[1:]):
            if b <= a:
                raise ValueError("record times must be strictly increasing")


def _is_cap(graph, scheme, j):
    """Dangling vertex with no stickiness: a pure Neumann reflection."""
    gp = scheme.gluing[j]
    return (len(graph.incident_edges(j)) == 1 and not gp.absorbing
            and gp.alpha == 0.0)


def _edge_walk(graph, scheme, rng, k, s, t, T, emit):
    """Walk edge k from arclength s until a non-reflecting endpoint or the
    horizon.  emit(k, t0, dts, ss) receives each batch of positions, the
    i-th taken at time t0 + dts[:i+1].sum().  Returns ("vertex", j, t) or
    ("horizon", s, T)."""
    e = graph.edges[k]
    L = graph.edge_length(k)
    h = scheme.h_edge
    sq = math.sqrt(2.0 * h)
    refl_lo = _is_cap(graph, scheme, e.tail)
    refl_hi = _is_cap(graph, scheme, e.head)
    while True:
        n_left = int((T - t) / h)
        m = min(_BLOCK, n_left)
        if m > 0:
            y = s + sq * np.cumsum(rng.standard_normal(m))
            dts = np.full(m, h)
        else:
            dt = T - t
            if dt <= 1e-18:
                return "horizon", s, T
            y = np.array([s + math.sqrt(2.0 * dt) * rng.standard_normal()])
            dts = np.array([dt])
        # folding the free walk is exact in law for symmetric increments
        if refl_lo and refl_hi:
            y = L - np.abs(np.mod(y, 2.0 * L) - L)
        elif refl_lo:
            y = np.abs(y)
        elif refl_hi:
            y = L - np.abs(L - y)
        hit_lo = np.flatnonzero(y <= 0.0) if not refl_lo else np.array([], int)
        hit_hi = np.flatnonzero(y >= L) if not refl_hi else np.array([], int)
        i_lo = hit_lo[0] if len(hit_lo) else len(y)
        i_hi = hit_hi[0] if len(hit_hi) else len(y)
        i = min(i_lo, i_hi)
        if i < len(y):
            emit(k, t, dts[:i + 1], np.clip(y[:i + 1], 0.0, L))
            t += float(dts[:i + 1].sum())
            return "vertex", (e.tail if i_lo <= i_hi else e.head), t
        emit(k, t, dts, y)
        t += float(dts.sum())
        s = float(y[-1])
        if m == 0:
            return "horizon", s, T


def _drive(graph, scheme, z0, T, rng, emit_block, emit_stay):
    """Run one path to the horizon; returns (final point, terminal flag).

    emit_block(k, t0, dts, ss) covers edge travel; emit_stay(j, t0, t1,
    depart, absorbed) covers the stay [t0, t1] at a vertex, with depart
    the restart point (None when the stay runs out the horizon).
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    p = graph.canonical(z0)
    t = 0.0
    if p.is_vertex:
        at_vertex, k, s = p.vertex, None, None
    else:
        at_vertex, k, s = None, p.edge, float(p.s)
    while True:
        if at_vertex is not None:
            j = at_vertex
            gp = scheme.gluing[j]
            if gp.absorbing:
                emit_stay(j, t, T, None, True)
                return GraphPoint.at_vertex(j), "absorbed"
            if t >= T - 1e-18:
                return GraphPoint.at_vertex(j), "horizon"
            ks = graph.incident_edges(j)
            if _is_cap(graph, scheme, j):
                k = ks[0]
                s = 0.0 if graph.edges[k].tail == j else graph.edge_length(k)
                at_vertex = None
                continue
            u = rng.random()
            acc = 0.0
            ki = len(ks) - 1
            for i, w in enumerate(gp.skew):
                acc += w
                if u < acc:
                    ki = i
                    break
            k = ks[ki]
            hold = float(oracle1d.sample_holding_time(
                rng, gp.alpha, scheme.delta_sim, 1)[0])
            t1 = min(t + hold, T)
            if graph.edges[k].tail == j:
                s = scheme.delta_sim
            else:
                s = graph.edge_length(k) - scheme.delta_sim
            depart = GraphPoint.on_edge(k, s) if t1 < T else None
            emit_stay(j, t, t1, depart, False)
            t = t1
            if depart is None:
                return GraphPoint.at_vertex(j), "horizon"
            at_vertex = None
            continue
        kind, val, t = _edge_walk(graph, scheme, rng, k, s, t, T, emit_block)
        if kind == "horizon":
            return GraphPoint.on_edge(k, val), "horizon"
        at_vertex = val


def simulate(graph, z0, T, scheme, rng, record_stride=256):
    """One path of the graph diffusion up to the horizon.

    Records the start, every vertex arrival and departure, every
    record_stride-th edge step, and the terminal point.
    """
    scheme.validate_for(graph)
    start = graph.canonical(z0)
    times = [0.0]
    points = [start]

    def push(t, p):
        if t > times[-1]:
            times.append(float(t))
            points.append(p)

    def block(k, t0, dts, ss):
        ts = t0 + np.cumsum(dts)
        for i in range(record_stride - 1, len(ss), record_stride):
            push(ts[i], GraphPoint.on_edge(k, float(ss[i])))

    def stay(j, t0, t1, depart, absorbed):
        push(t0, GraphPoint.at_vertex(j))
        if depart is not None:
            push(t1, depart)

    final, terminal = _drive(graph, scheme, start, T, rng, block, stay)
    push(T, final)
    return GraphPath(times=times, points=points, terminal=terminal)


def sample_marginal(graph, scheme, z0, t, n_paths, seed=0):
    """n_paths independent draws of the time-t marginal, as GraphPoints."""
    scheme.validate_for(graph)
    rng = np.random.default_rng(seed)
    out = []
    noop = lambda *a: None
    for _ in range(n_paths):
        final, _term = _drive(graph, scheme, z0, t, rng, noop, noop)
        out.append(final)
    return out


def vertex_mean_occupation(graph, paths, j, delta):
    """Mean first time the recorded path reaches graph distance delta from
    vertex j, divided by delta; for shell-scheme paths started at j and
    delta = delta_sim this estimates delta/2 + alpha."""
    if graph.gluing_params(j).absorbing:
        raise ValueError(f"vertex {j} is absorbing: occupation is infinite")
    target = GraphPoint.at_vertex(j)
    hits = []
    for p in paths:
        q0 = graph.canonical(p.points[0])
        if not (q0.is_vertex and q0.vertex == j):
            raise ValueError(f"path does not start at vertex {j}")
        hit = None
        for t, q in zip(p.times, p.points):
            if graph.graph_distance(q, target) >= delta - 1e-12:
                hit = t
                break
        if hit is None:
            raise ValueError("path never reaches distance delta; "
                             "extend the horizon")
        hits.append(hit)
    return float(np.mean(hits)) / delta


# --- test functions and the resolvent identity ---


@dataclass(frozen=True)
class EdgeFunction:
    """Piecewise-polynomial function on the graph.

    coeffs maps edge id to 1-D polynomial coefficients (lowest order
    first) in the arclength from the edge's tail vertex.
    """

    coeffs: dict

    def value(self, graph, p):
        p = graph.canonical(p)
        if p.is_vertex:
            k = graph.incident_edges(p.vertex)[0]
            s = _end_arclength(graph, k, p.vertex)
            return float(npoly.polyval(s, self.coeffs[k]))
        return float(npoly.polyval(p.s, self.coeffs[p.edge]))

    def second(self, graph, p):
        """Generator value f'' at p (edge-wise; at a vertex, via the first
        incident edge, meaningful once the gluing check passed)."""
        p = graph.canonical(p)
        if p.is_vertex:
            k = graph.incident_edges(p.vertex)[0]
            s = _end_arclength(graph, k, p.vertex)
        else:
            k, s = p.edge, p.s
        return float(npoly.polyval(s, npoly.polyder(self.coeffs[k], 2)))


def _end_arclength(graph, k, j):
    return 0.0 if graph.edges[k].tail == j else graph.edge_length(k)


def check_gluing(graph, f: EdgeFunction, tol=1e-8):
    """Verify continuity and the vertex conditions; raises naming the
    first violated vertex.

    At an absorbing vertex every incident f'' must vanish.  Elsewhere the
    skew-weighted outward derivatives must sum to alpha times f''; when
    alpha is positive the incident f'' values must also agree, since the
    generator is evaluated at the vertex during holding periods.
    """
    for j in sorted(graph.vertices):
        ks = graph.incident_edges(j)
        vals, ders, secs = [], [], []
        for k in ks:
            s = _end_arclength(graph, k, j)
            c = np.asarray(f.coeffs[k], dtype=float)
            sign = 1.0 if graph.edges[k].tail == j else -1.0
            vals.append(float(npoly.polyval(s, c)))
            ders.append(sign * float(npoly.polyval(s, npoly.polyder(c))))
            secs.append(float(npoly.polyval(s, npoly.polyder(c, 2))))
        if max(vals) - min(vals) > tol:
            raise ValueError(f"test function discontinuous at vertex {j}")
        gp = graph.gluing_params(j)
        if gp.absorbing:
            if max(abs(x) for x in secs) > tol:
                raise ValueError(
                    f"nonzero f'' at absorbing vertex {j}")
            continue
        if gp.alpha > 0 and max(secs) - min(secs) > tol:
            raise ValueError(f"f'' mismatch at sticky vertex {j}")
        resid = sum(p * d for p, d in zip(gp.skew, ders)) - gp.alpha * secs[0]
        if abs(resid) > tol:
            raise ValueError(f"gluing condition violated at vertex {j}")


def _sup_integrand(graph, f, lam, grid=512):
    sup = 0.0
    for k, c in f.coeffs.items():
        ss = np.linspace(0.0, graph.edge_length(k), grid)
        g = lam * npoly.polyval(ss, c) - npoly.polyval(
            ss, npoly.polyder(np.asarray(c, dtype=float), 2))
        sup = max(sup, float(np.max(np.abs(g))))
    return sup


@dataclass(frozen=True)
class ResolventResult:
    residual: float
    ci95: float
    tail_bound: float
    n_paths: int


def resolvent_grid(graph, funcs, lams, z0, n_paths, T, scheme, seed=0):
    """Monte Carlo residuals of the resolvent identity, one per (f, lam).

    Each entry estimates E int_0^T e^(-lam t)(lam f - f'')(Z(t)) dt
    - f(z0).  All pairs share the same n_paths trajectories, so entries
    are correlated but each residual and its ci95 are individually valid.
    Stays at vertices integrate in closed form, and an absorbed path
    contributes its exact tail out to infinity.  The reported tail_bound,
    e^(-lam T) sup|lam f - f''| / lam, covers horizon truncation and is
    added to the error budget by the caller.

    Returns a list of rows, one per f, each a list of ResolventResult
    per lam.
    """
    lams = [float(l) for l in lams]
    if any(l <= 0 for l in lams):
        raise ValueError("rates must be positive")
    for f in funcs:
        check_gluing(graph, f)
    scheme.validate_for(graph)
    rng = np.random.default_rng(seed)
    nf, nl = len(funcs), len(lams)
    second = {}
    vval = np.empty((nf, len(graph.vertices)))
    vsec = np.empty_like(vval)
    vid = {j: i for i, j in enumerate(sorted(graph.vertices))}
    for fi, f in enumerate(funcs):
        second[fi] = {k: npoly.polyder(np.asarray(c, dtype=float), 2)
                      for k, c in f.coeffs.items()}
        for j, i in vid.items():
            vval[fi, i] = f.value(graph, GraphPoint.at_vertex(j))
            vsec[fi, i] = f.second(graph, GraphPoint.at_vertex(j))
    lamv = np.array(lams)
    totals = np.empty((n_paths, nf, nl))
    acc = np.zeros((nf, nl))

    def block(k, t0, dts, ss):
        ts = t0 + np.cumsum(dts)
        wl = np.exp(-np.outer(lamv, ts)) * dts  # (nl, m)
        for fi, f in enumerate(funcs):
            fs = npoly.polyval(ss, f.coeffs[k])
            d2 = npoly.polyval(ss, second[fi][k])
            # integrand (lam f - f'') against the lam-discounted dt weights
            acc[fi] += np.einsum("lm,lm->l", np.outer(lamv, fs) - d2, wl)

    def stay(j, t0, t1, depart, absorbed):
        i = vid[j]
        if absorbed:
            # f'' = 0 there by the gluing check; exact tail to infinity
            acc[:] += np.outer(vval[:, i], np.exp(-lamv * t0))
            return
        w = (np.exp(-lamv * t0) - np.exp(-lamv * t1)) / lamv
        g = np.outer(vval[:, i], lamv) - vsec[:, i][:, None]
        acc[:] += g * w

    f0 = np.array([f.value(graph, z0) for f in funcs])
    for i in range(n_paths):
        acc[:] = 0.0
        _drive(graph, scheme, z0, T, rng, block, stay)
        totals[i] = acc - f0[:, None]
    out = []
    for fi, f in enumerate(funcs):
        sup = {li: _sup_integrand(graph, f, lam)
               for li, lam in enumerate(lams)}
        row = []
        for li, lam in enumerate(lams):
            col = totals[:, fi, li]
            resid = float(np.mean(col))
            ci = _Z95 * float(np.std(col, ddof=1)) / math.sqrt(n_paths)
            tail = math.exp(-lam * T) * sup[li] / lam
            row.append(ResolventResult(residual=resid, ci95=ci,
                                       tail_bound=tail, n_paths=n_paths))
        out.append(row)
    return out


def resolvent_test(graph, f: EdgeFunction, lam, z0, n_paths, T, scheme,
                   seed=0):
    """Single-pair convenience wrapper around resolvent_grid."""
    return resolvent_grid(graph, [f], [lam], z0, n_paths, T, scheme,
                          seed=seed)[0][0]


def cubic_family(graph, n_funcs=3):
    """Edge-wise cubic test functions solved from the gluing system.

    Constraints per vertex: continuity of f; at absorbing vertices f''=0
    on every incident edge; elsewhere continuity of f'' plus the gluing
    identity sum_k p_k f_k' = alpha f''.  The constant function spans part
    of the null space and is projected out; the rest is orthonormalized
    and the first n_funcs directions are returned.
    """
    ks = sorted(graph.edges)
    kidx = {k: i for i, k in enumerate(ks)}
    nun = 4 * len(ks)

    def rows_for_vertex(j):
        rows = []
        inc = graph.incident_edges(j)
        ends = {}
        for k in inc:
            s = _end_arclength(graph, k, j)
            sign = 1.0 if graph.edges[k].tail == j else -1.0
            val = np.array([1.0, s, s * s, s ** 3])
            der = sign * np.array([0.0, 1.0, 2 * s, 3 * s * s])
            sec = np.array([0.0, 0.0, 2.0, 6 * s])
            ends[k] = (val, der, sec)
        for ka, kb in zip(inc, inc[1:]):
            row = np.zeros(nun)
            row[4 * kidx[ka]:4 * kidx[ka] + 4] = ends[ka][0]
            row[4 * kidx[kb]:4 * kidx[kb] + 4] -= ends[kb][0]
            rows.append(row)
        gp = graph.gluing_params(j)
        if gp.absorbing:
            for k in inc:
                row = np.zeros(nun)
                row[4 * kidx[k]:4 * kidx[k] + 4] = ends[k][2]
                rows.append(row)
            return rows
        for ka, kb in zip(inc, inc[1:]):
            row = np.zeros(nun)
            row[4 * kidx[ka]:4 * kidx[ka] + 4] = ends[ka][2]
            row[4 * kidx[kb]:4 * kidx[kb] + 4] -= ends[kb][2]
            rows.append(row)
        row = np.zeros(nun)
        for p, k in zip(gp.skew, inc):
            row[4 * kidx[k]:4 * kidx[k] + 4] += p * ends[k][1]
        row[4 * kidx[inc[0]]:4 * kidx[inc[0]] + 4] -= gp.alpha * ends[inc[0]][2]
        rows.append(row)
        return rows

    rows = []
    for j in sorted(graph.vertices):
        rows.extend(rows_for_vertex(j))
    M = np.array(rows)
    _, sv, vt = np.linalg.svd(M)
    rank = int(np.sum(sv > 1e-10 * sv[0])) if len(sv) else 0
    null = vt[rank:].T
    const = np.zeros(nun)
    for k in ks:
        const[4 * kidx[k]] = 1.0
    const /= np.linalg.norm(const)
    null = null - np.outer(const, const @ null)
    u, sv2, _ = np.linalg.svd(null, full_matrices=False)
    n_avail = int(np.sum(sv2 > 1e-10)) if len(sv2) else 0
    if n_avail < n_funcs:
        raise ValueError(
            f"gluing system leaves only {n_avail} non-constant cubics")
    out = []
    for i in range(n_funcs):
        vec = u[:, i]
        out.append(EdgeFunction(
            coeffs={k: vec[4 * kidx[k]:4 * kidx[k] + 4].copy() for k in ks}))
    return out


# --- marginal comparison in the graph metric ---


def _binned(graph, samples, width):
    """Bin graph points: edge-interior mass at bin centers, endpoint mass
    at the vertices.  Returns (support GraphPoints, weights)."""
    pts, wts = [], []
    index = {}

    def add(key, p, w):
        if key not in index:
            index[key] = len(pts)
            pts.append(p)
            wts.append(0.0)
        wts[index[key]] += w

    w1 = 1.0 / len(samples)
    for p in samples:
        q = graph.canonical(p)
        if q.is_vertex:
            add(("v", q.vertex), q, w1)
            continue
        if q.edge not in graph.edges:
            raise ValueError(f"sample on unknown edge {q.edge}")
        L = graph.edge_length(q.edge)
        if not 0.0 <= q.s <= L:
            raise ValueError("sample arclength outside its edge")
        b = min(int(q.s / width), max(int(math.ceil(L / width)) - 1, 0))
        center = min((b + 0.5) * width, L)
        add(("e", q.edge, b), GraphPoint.on_edge(q.edge, center), w1)
    return pts, np.array(wts)


def compare_marginals(graph, tube_samples, graph_samples, bin_width):
    """1-Wasserstein distance between two equal-time marginal samples.

    Both sample sets are binned at bin_width and the optimal transport
    between the binned measures is solved exactly as a linear program
    with graph-metric costs.
    """
    if len(tube_samples) < 1 or len(graph_samples) < 1:
        raise ValueError("need samples on both sides")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    pa, wa = _binned(graph, tube_samples, bin_width)
    pb, wb = _binned(graph, graph_samples, bin_width)
    cost = np.empty((len(pa), len(pb)))
    for i, p in enumerate(pa):
        for jj, q in enumerate(pb):
            cost[i, jj] = graph.graph_distance(p, q)
    na, nb = len(pa), len(pb)
    a_eq = []
    for i in range(na):
        row = np.zeros(na * nb)
        row[i * nb:(i + 1) * nb] = 1.0
        a_eq.append(row)
    for jj in range(nb):
        row = np.zeros(na * nb)
        row[jj::nb] = 1.0
        a_eq.append(row)
    res = linprog(cost.ravel(), A_eq=np.array(a_eq),
                  b_eq=np.concatenate([wa, wb]), bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def tree_w1(graph, samples_a, samples_b, bin_width):
    """Closed-form W1 on trees: integral of |mass difference| over every
    edge cut.  Used as an independent oracle for compare_marginals."""
    if len(graph.edges) != len(graph.vertices) - 1:
        raise ValueError("closed form requires a tree")
    pa, wa = _binned(graph, samples_a, bin_width)
    pb, wb = _binned(graph, samples_b, bin_width)
    diff = {}
    for pts, wts, sign in ((pa, wa, 1.0), (pb, wb, -1.0)):
        for p, w in zip(pts, wts):
            key = (("v", p.vertex) if p.is_vertex else ("e", p.edge, p.s))
            diff[key] = diff.get(key, 0.0) + sign * w

    root = sorted(graph.vertices)[0]
    seen = {root}
    order = []
    stack = [root]
    while stack:
        j = stack.pop()
        for k in graph.incident_edges(j):
            e = graph.edges[k]
            other = e.head if e.tail == j else e.tail
            if other not in seen:
                seen.add(other)
                order.append((k, j, other))
                stack.append(other)

    total = 0.0
    subtree = {j: diff.get(("v", j), 0.0) for j in graph.vertices}
    for k, parent, child in reversed(order):
        L = graph.edge_length(k)
        away = graph.edges[k].tail == parent
        cuts = sorted((key[2] if away else L - key[2], m)
                      for key, m in diff.items()
                      if key[0] == "e" and key[1] == k)
        mass = subtree[child]
        prev = L
        for x, m in reversed(cuts):
            total += abs(mass) * (prev - x)
            mass += m
            prev = x
        total += abs(mass) * prev
        subtree[parent] += mass
    return total
