"""Killed shell chain around a junction and its conditioned laws.

One chain cycle watches the reflected diffusion leave the shell at graph
distance delta' from a vertex, touch either the inner collar C(R + 3 eps)
or the doubled shell C(2 delta'), and come back to C(delta'); a path that
instead reaches C(delta) on the outer excursion is absorbed.  Conditioned
on survival the chain law contracts to a unique quasi-stationary
distribution, estimated here as a binned measure on the restart shell.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .rbm import ShellTarget, SimConfig, SimTimeout, batch_exits
from .tube import ShellSpec

_DEFAULT_BINS = {2: 8, 3: 16}
_Z95 = 1.959963984540054


@dataclass(frozen=True)
class ChainConfig:
    """Shell levels and binning for the killed chain at one vertex.

    The levels must satisfy R + 3 eps < delta' and 2 delta' < delta once a
    domain is attached (validate_for); transverse bins are equal-measure
    per incident edge, so the uniform shell law is exactly representable.
    """

    vertex: int
    delta_p: float
    delta: float
    sim: SimConfig
    bins_per_edge: int | None = None

    def __post_init__(self):
        if self.delta_p <= 0:
            raise ValueError("delta' must be positive")
        if 2.0 * self.delta_p >= self.delta:
            raise ValueError("need 2 delta' < delta")
        if self.bins_per_edge is not None and self.bins_per_edge < 4:
            raise ValueError("need at least 4 bins per edge")

    def bins(self, dom):
        if self.bins_per_edge is not None:
            return self.bins_per_edge
        return _DEFAULT_BINS[dom.d]

    def collar(self, dom):
        """Graph radius of the inner target shell C(R + 3 eps)."""
        return dom.ball_radius[self.vertex] + 3.0 * dom.epsilon

    def validate_for(self, dom):
        m = self.collar(dom)
        if self.delta_p <= m:
            raise ValueError(
                f"delta'={self.delta_p} does not clear the collar {m:.4g}")
        dom.validate_shell(ShellSpec(vertex=self.vertex, delta=self.delta))


@dataclass(frozen=True)
class ChainState:
    """Position on C(delta'), or absorbed when z is None.

    stream is the cursor into the per-path random streams; every leg
    advances it, which keeps repeated steps reproducible under a fixed
    cfg.sim.seed (the simulator's determinism contract stands in for an
    explicit rng argument).
    """

    z: np.ndarray | None
    stream: int = 0

    @property
    def absorbed(self):
        return self.z is None


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Bin weights on the (incident edge, transverse bin) product space.

    history holds survivor counts per cycle (index 0 is the start count);
    qsd_estimate attaches its stabilization evidence to the last two
    fields.
    """

    edges: tuple
    weights: np.ndarray
    survivors: int
    history: tuple = ()
    stabilization_tv: float | None = None
    stabilized: bool | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] != len(self.edges):
            raise ValueError("weights must be an (n_edges, n_bins) array")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if self.survivors < 0:
            raise ValueError("survivor count must be nonnegative")

    @property
    def total(self):
        return float(self.weights.sum())

    def normalized(self):
        t = self.total
        if t <= 0:
            raise ValueError("measure has zero mass")
        return self.weights / t


def tv_distance(m1, m2):
    """Half L1 distance between the normalized bin weights."""
    if m1.edges != m2.edges or m1.weights.shape != m2.weights.shape:
        raise ValueError("measures were built with different binnings")
    return 0.5 * float(np.abs(m1.normalized() - m2.normalized()).sum())


def _raise_on_timeout(records):
    for r in records:
        if r.code == "timeout":
            raise SimTimeout(r.sigma, r.steps)


def _locate_bin(dom, cfg, z, nbins, edge=None):
    """(incident-edge index, transverse bin) of a point on C(delta')."""
    g = dom.graph
    j = cfg.vertex
    ks = g.incident_edges(j)
    w = np.asarray(z, dtype=float) - g.position_of_vertex(j)
    if edge is None:
        ax = [float(np.dot(w, g.direction_from(j, k))) for k in ks]
        ei = int(np.argmax(ax))
    else:
        ei = ks.index(edge)
    k = ks[ei]
    _, normals = dom.frame(j, k)
    r = g.edges[k].lam * dom.epsilon
    if dom.d == 2:
        x = (float(np.dot(w, normals[0])) + r) / (2.0 * r)
    else:
        t1 = float(np.dot(w, normals[0]))
        t2 = float(np.dot(w, normals[1]))
        x = (math.atan2(t2, t1) + math.pi) / (2.0 * math.pi)
    return ei, min(nbins - 1, max(0, int(x * nbins)))


def _bin_points(dom, cfg, pts, edges=None):
    nb = cfg.bins(dom)
    ks = dom.graph.incident_edges(cfg.vertex)
    w = np.zeros((len(ks), nb))
    for i, z in enumerate(pts):
        e = None if edges is None else edges[i]
        ei, b = _locate_bin(dom, cfg, z, nb, edge=e)
        w[ei, b] += 1.0
    return EmpiricalMeasure(edges=tuple(ks), weights=w, survivors=len(pts))


def _require_on_shell(dom, cfg, z):
    spec = ShellSpec(vertex=cfg.vertex, delta=cfg.delta_p)
    band = 1e-7 * (1.0 + cfg.delta_p)
    side, _ = dom.shell_membership(z, spec, band=band)
    if side != 0:
        raise ValueError("start is not on the restart shell C(delta')")


def _advance_cycle(dom, cfg, zs, stream):
    """One chain cycle for every row of zs.

    Leg one runs from C(delta') until the collar C(R + 3 eps) or the
    doubled shell C(2 delta'); leg two returns to C(delta').  Only the
    outer branch can absorb, by reaching C(delta) first; the inner branch
    must cross C(delta') before anything farther.  Returns new positions,
    the survival mask, the graph edge of each return, and the advanced
    stream cursor.
    """
    n = len(zs)
    j = cfg.vertex
    sim = cfg.sim
    first = batch_exits(
        dom, zs, ShellTarget(j, hi=2.0 * cfg.delta_p, lo=cfg.collar(dom)),
        sim, path_ids=stream + np.arange(n, dtype=np.int64))
    stream += n
    _raise_on_timeout(first)
    out = np.empty_like(zs)
    alive = np.ones(n, dtype=bool)
    edges = np.full(n, -1, dtype=np.int64)
    for outer in (False, True):
        idx = [i for i, r in enumerate(first) if (r.code == "hi") == outer]
        if not idx:
            continue
        mids = np.array([first[i].location for i in idx])
        if outer:
            tgt = ShellTarget(j, hi=cfg.delta, lo=cfg.delta_p)
        else:
            tgt = ShellTarget(j, hi=cfg.delta_p)
        sub = batch_exits(dom, mids, tgt, sim,
                          path_ids=stream + np.arange(len(idx),
                                                      dtype=np.int64))
        stream += len(idx)
        _raise_on_timeout(sub)
        for i, r in zip(idx, sub):
            if outer and r.code == "hi":
                alive[i] = False
            else:
                out[i] = r.location
                edges[i] = r.edge
    return out, alive, edges, stream


def chain_step(dom, state: ChainState, cfg: ChainConfig) -> ChainState:
    """One cycle of the killed chain from a live state."""
    if state.absorbed:
        raise ValueError("chain is absorbed")
    cfg.validate_for(dom)
    z = np.atleast_2d(np.asarray(state.z, dtype=float))
    out, alive, _, stream = _advance_cycle(dom, cfg, z, state.stream)
    if not alive[0]:
        return ChainState(z=None, stream=stream)
    return ChainState(z=out[0], stream=stream)


def conditioned_distribution(dom, z0, n, n_paths, cfg, stream0=0):
    """Binned law of the chain after n cycles among surviving paths.

    All paths start at z0 on C(delta').  Survivor counts after every cycle
    are kept in the result's history.
    """
    cfg.validate_for(dom)
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n_paths < 1:
        raise ValueError("need at least one path")
    z0 = np.asarray(z0, dtype=float)
    _require_on_shell(dom, cfg, z0)
    if n == 0:
        meas = _bin_points(dom, cfg, [z0] * n_paths)
        return replace(meas, history=(n_paths,))
    zs = np.tile(z0, (n_paths, 1))
    edges = None
    history = [n_paths]
    stream = stream0
    for cyc in range(1, n + 1):
        zs, alive, edges, stream = _advance_cycle(dom, cfg, zs, stream)
        zs = zs[alive]
        edges = edges[alive]
        history.append(len(zs))
        if len(zs) == 0:
            raise RuntimeError(
                f"all paths absorbed by cycle {cyc}; increase n_paths")
    meas = _bin_points(dom, cfg, zs, edges=edges)
    return replace(meas, history=tuple(history))


def conditioned_snapshots(dom, z0, ns, n_paths, cfg, stream0=0):
    """Conditioned laws at several cycle counts from one shared chain run.

    Returns {n: EmpiricalMeasure} for every n in ns; snapshots at
    different n share trajectories, so compare them only against
    independently generated ensembles.
    """
    ns = sorted(set(int(n) for n in ns))
    if not ns:
        raise ValueError("ns must be non-empty")
    if ns[0] < 0:
        raise ValueError("cycle counts must be nonnegative")
    cfg.validate_for(dom)
    if n_paths < 1:
        raise ValueError("need at least one path")
    z0 = np.asarray(z0, dtype=float)
    _require_on_shell(dom, cfg, z0)
    out = {}
    if ns[0] == 0:
        out[0] = replace(_bin_points(dom, cfg, [z0] * n_paths),
                         history=(n_paths,))
        ns = ns[1:]
    if not ns:
        return out
    zs = np.tile(z0, (n_paths, 1))
    edges = None
    history = [n_paths]
    stream = stream0
    for cyc in range(1, ns[-1] + 1):
        zs, alive, edges, stream = _advance_cycle(dom, cfg, zs, stream)
        zs = zs[alive]
        edges = edges[alive]
        history.append(len(zs))
        if len(zs) == 0:
            raise RuntimeError(
                f"all paths absorbed by cycle {cyc}; increase n_paths")
        if cyc in ns:
            out[cyc] = replace(_bin_points(dom, cfg, zs, edges=edges),
                               history=tuple(history))
    return out


def qsd_estimate(dom, cfg, n_long, n_paths, tol=0.05):
    """Conditioned law at n_long started from the uniform shell measure.

    Stabilization evidence, the TV distance between the laws at n_long
    and n_long // 2, is attached to the result, with the verdict taken
    against max(tol, sqrt(bins / survivors)), the binning noise floor.
    A non-stabilized run comes back flagged, not raised.
    """
    cfg.validate_for(dom)
    if n_long < 1:
        raise ValueError("n_long must be >= 1")
    if n_paths < 1:
        raise ValueError("need at least one path")
    rng = np.random.default_rng(cfg.sim.seed)
    zs, _ = dom.sample_shell(cfg.vertex, cfg.delta_p, rng, n_paths)
    half = n_long // 2
    snap = _bin_points(dom, cfg, zs) if half == 0 else None
    edges = None
    history = [n_paths]
    stream = 0
    for cyc in range(1, n_long + 1):
        zs, alive, edges, stream = _advance_cycle(dom, cfg, zs, stream)
        zs = zs[alive]
        edges = edges[alive]
        history.append(len(zs))
        if len(zs) == 0:
            raise RuntimeError(
                f"all paths absorbed by cycle {cyc}; increase n_paths")
        if cyc == half:
            snap = _bin_points(dom, cfg, zs, edges=edges)
    final = _bin_points(dom, cfg, zs, edges=edges)
    tv = tv_distance(final, snap)
    floor = math.sqrt(final.weights.size / max(1, final.survivors))
    return replace(final, history=tuple(history), stabilization_tv=tv,
                   stabilized=bool(tv < max(tol, floor)))


def _coarsen(meas):
    nb = meas.weights.shape[1]
    if nb < 2 or nb % 2:
        raise RuntimeError("cannot coarsen the binning further")
    w = meas.weights.reshape(len(meas.edges), nb // 2, 2).sum(axis=2)
    return replace(meas, weights=w)


def _uniform_weights(dom, cfg, nb):
    """The uniform shell law: skew weight per edge, flat across bins."""
    sk = np.asarray(dom.graph.skew_probabilities(cfg.vertex), dtype=float)
    return np.repeat(sk[:, None], nb, axis=1) / nb


def dobrushin_check(dom, cfg, n0=2, starts=None, n_paths=2000):
    """Empirical minorization and survival-ratio constants at horizon n0.

    c1_hat is the worst ratio of conditioned bin mass at n0 to the
    uniform shell measure over the given starts (default: the section
    centers of every incident edge); eta_hat is the 95 per cent
    half-width of that worst ratio.  c2_hat is the worst ratio over
    n <= n0 of survival under the uniform start to the best survival
    among the starts; per-cycle survival does not depend on the start,
    so it sits at 1 up to noise.  Ensembles get distinct seeds derived
    from cfg.sim.seed.
    """
    cfg.validate_for(dom)
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    g = dom.graph
    j = cfg.vertex
    ks = g.incident_edges(j)
    if starts is None:
        starts = [g.position_of_vertex(j)
                  + cfg.delta_p * g.direction_from(j, k) for k in ks]
    nb = cfg.bins(dom)
    covered = set()
    for z in starts:
        ei, _ = _locate_bin(dom, cfg, z, nb)
        covered.add(ks[ei])
    if covered != set(ks):
        raise ValueError("starts must cover every incident edge")

    measures = []
    for s, z in enumerate(starts):
        mcfg = replace(cfg, sim=replace(cfg.sim,
                                        seed=cfg.sim.seed + 1009 * (s + 1)))
        measures.append(conditioned_distribution(dom, z, n0, n_paths, mcfg))

    ncfg = replace(cfg, sim=replace(cfg.sim, seed=cfg.sim.seed + 9173))
    rng = np.random.default_rng(ncfg.sim.seed)
    zs, _ = dom.sample_shell(j, cfg.delta_p, rng, n_paths)
    nu_hist = [n_paths]
    stream = 0
    for _ in range(n0):
        zs, alive, _, stream = _advance_cycle(dom, ncfg, zs, stream)
        zs = zs[alive]
        nu_hist.append(len(zs))
        if len(zs) == 0:
            raise RuntimeError(
                "all paths absorbed under the uniform start; "
                "increase n_paths")

    c2_hat = math.inf
    for n in range(1, n0 + 1):
        best = max(m.history[n] / m.history[0] for m in measures)
        c2_hat = min(c2_hat, (nu_hist[n] / nu_hist[0]) / best)

    if any(np.any(m.weights == 0) for m in measures):
        measures = [_coarsen(m) for m in measures]
        nb //= 2
        if any(np.any(m.weights == 0) for m in measures):
            raise RuntimeError(
                "empty bins persist after one coarsening; increase n_paths")
    nu = _uniform_weights(dom, cfg, nb)
    c1_hat = math.inf
    eta_hat = 0.0
    for m in measures:
        p = m.normalized()
        ratio = p / nu
        i = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
        if ratio[i] < c1_hat:
            c1_hat = float(ratio[i])
            se = _Z95 * math.sqrt(p[i] * (1.0 - p[i]) / m.survivors)
            eta_hat = float(se / nu[i])
    return c1_hat, c2_hat, eta_hat
