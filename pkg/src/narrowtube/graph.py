"""Embedded metric graphs: geometry, metric, scaling regimes, gluing parameters.

A graph lives in R^d (d = 2 or 3) with straight edges. Every edge carries a
width factor lambda_k > 0 and every vertex a radius law r_j(eps) =
radius_coeff * eps**radius_exp together with a prefactor rho_j. The regime of
a vertex (how fast its ball shrinks relative to the tube cross-section)
decides the behaviour of the limiting diffusion at that vertex: pass-through,
sticky, or absorbing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

# volume of the unit ball in R^n, n = 1, 2, 3
_UNIT_BALL = {1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}

_TIE_TOL = 1e-12


def unit_ball_volume(n):
    """V_n for n in {1, 2, 3}."""
    return _UNIT_BALL[n]


class Regime(enum.Enum):
    SMALL = "small"
    INTERMEDIATE = "intermediate"
    LARGE = "large"


@dataclass(frozen=True)
class Vertex:
    id: int
    position: np.ndarray
    rho: float = 1.0
    radius_coeff: float = 1.0
    radius_exp: float = 0.75

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.rho <= 0:
            raise ValueError(f"vertex {self.id}: rho must be positive")
        if self.radius_coeff <= 0:
            raise ValueError(f"vertex {self.id}: radius_coeff must be positive")
        if not 0.0 < self.radius_exp < 1.0:
            raise ValueError(
                f"vertex {self.id}: radius exponent must lie in (0, 1), "
                f"got {self.radius_exp}"
            )

    def radius(self, eps):
        """r_j(eps) = c_j * eps**beta_j."""
        return self.radius_coeff * eps**self.radius_exp

    def ball_radius(self, eps):
        """R_j = rho_j * r_j(eps)."""
        return self.rho * self.radius(eps)


@dataclass(frozen=True)
class Edge:
    """Straight segment between two vertices.

    Arclength along the edge is measured from the lower-indexed endpoint
    (``tail``), so ``tail < head`` always holds after construction.
    """

    id: int
    tail: int
    head: int
    lam: float = 1.0

    def __post_init__(self):
        if self.tail == self.head:
            raise ValueError(f"edge {self.id}: loop edges not allowed")
        if self.lam <= 0:
            raise ValueError(f"edge {self.id}: lambda must be positive")
        if self.tail > self.head:
            t, h = self.head, self.tail
            object.__setattr__(self, "tail", t)
            object.__setattr__(self, "head", h)


@dataclass(frozen=True)
class GraphPoint:
    """Point on the graph: either a vertex or an (edge, arclength) pair."""

    vertex: int | None = None
    edge: int | None = None
    s: float = 0.0

    def __post_init__(self):
        if (self.vertex is None) == (self.edge is None):
            raise ValueError("exactly one of vertex/edge must be set")

    @classmethod
    def at_vertex(cls, j):
        return cls(vertex=int(j))

    @classmethod
    def on_edge(cls, k, s):
        return cls(edge=int(k), s=float(s))

    @property
    def is_vertex(self):
        return self.vertex is not None


@dataclass(frozen=True)
class GluingParams:
    """Limiting vertex behaviour: skew probabilities and stickiness.

    ``absorbing`` is set for large vertices; then ``skew`` and ``alpha`` are
    meaningless and left empty/zero.
    """

    skew: np.ndarray
    alpha: float
    absorbing: bool = False


class Graph:
    """Simple, finite, connected embedded metric graph."""

    def __init__(self, dimension, vertices, edges):
        if dimension not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        self.dimension = int(dimension)
        self.vertices = {v.id: v for v in vertices}
        if len(self.vertices) != len(vertices):
            raise ValueError("duplicate vertex ids")
        self.edges = {e.id: e for e in edges}
        if len(self.edges) != len(edges):
            raise ValueError("duplicate edge ids")

        seen = set()
        for e in self.edges.values():
            if e.tail not in self.vertices or e.head not in self.vertices:
                raise ValueError(f"edge {e.id}: unknown endpoint")
            pair = (e.tail, e.head)
            if pair in seen:
                raise ValueError(f"parallel edge {e.id} between {pair}")
            seen.add(pair)

        for v in self.vertices.values():
            if v.position.shape != (self.dimension,):
                raise ValueError(
                    f"vertex {v.id}: position must have {self.dimension} coordinates"
                )

        self._incident = {j: [] for j in self.vertices}
        for e in sorted(self.edges.values(), key=lambda e: e.id):
            self._incident[e.tail].append(e.id)
            self._incident[e.head].append(e.id)

        if any(not ks for ks in self._incident.values()):
            raise ValueError("isolated vertex")

        self._lengths = {}
        for e in self.edges.values():
            L = float(np.linalg.norm(self.position_of_vertex(e.head)
                                     - self.position_of_vertex(e.tail)))
            if L <= 0:
                raise ValueError(f"edge {e.id}: zero length")
            self._lengths[e.id] = L

        self._vid = sorted(self.vertices)
        self._vidx = {j: i for i, j in enumerate(self._vid)}
        self._check_connected()
        self._dist = self._vertex_distances()

    def _check_connected(self):
        reach = {self._vid[0]}
        frontier = [self._vid[0]]
        while frontier:
            j = frontier.pop()
            for k in self._incident[j]:
                e = self.edges[k]
                other = e.head if e.tail == j else e.tail
                if other not in reach:
                    reach.add(other)
                    frontier.append(other)
        if reach != set(self._vid):
            raise ValueError("graph is not connected")

    def _vertex_distances(self):
        n = len(self._vid)
        rows, cols, data = [], [], []
        for e in self.edges.values():
            i, j = self._vidx[e.tail], self._vidx[e.head]
            rows += [i, j]
            cols += [j, i]
            data += [self._lengths[e.id], self._lengths[e.id]]
        m = csr_matrix((data, (rows, cols)), shape=(n, n))
        return dijkstra(m, directed=False)

    # --- basic geometry ---

    def position_of_vertex(self, j):
        return self.vertices[j].position

    def edge_length(self, k):
        return self._lengths[k]

    def incident_edges(self, j):
        """Edge ids incident to vertex j, ascending."""
        return list(self._incident[j])

    def edge_unit(self, k):
        """Unit vector from tail to head of edge k."""
        e = self.edges[k]
        d = self.position_of_vertex(e.head) - self.position_of_vertex(e.tail)
        return d / self._lengths[k]

    def direction_from(self, j, k):
        """Unit vector pointing outward from vertex j along edge k."""
        e = self.edges[k]
        if j == e.tail:
            return self.edge_unit(k)
        if j == e.head:
            return -self.edge_unit(k)
        raise ValueError(f"vertex {j} is not an endpoint of edge {k}")

    def other_endpoint(self, k, j):
        e = self.edges[k]
        if j == e.tail:
            return e.head
        if j == e.head:
            return e.tail
        raise ValueError(f"vertex {j} is not an endpoint of edge {k}")

    def position(self, p: GraphPoint):
        """Embedding coordinates of a graph point."""
        if p.is_vertex:
            return self.position_of_vertex(p.vertex).copy()
        e = self.edges[p.edge]
        if not 0.0 <= p.s <= self._lengths[p.edge] + _TIE_TOL:
            raise ValueError(f"arclength {p.s} outside edge {p.edge}")
        return self.position_of_vertex(e.tail) + p.s * self.edge_unit(p.edge)

    def canonical(self, p: GraphPoint):
        """Map endpoint arclengths to the vertex form; otherwise identity."""
        if p.is_vertex:
            return p
        e = self.edges[p.edge]
        if abs(p.s) <= _TIE_TOL:
            return GraphPoint.at_vertex(e.tail)
        if abs(p.s - self._lengths[p.edge]) <= _TIE_TOL:
            return GraphPoint.at_vertex(e.head)
        return p

    def _dist_to_vertex(self, p: GraphPoint, j):
        """Shortest-path distance from a graph point to a vertex."""
        if p.is_vertex:
            return float(self._dist[self._vidx[p.vertex], self._vidx[j]])
        e = self.edges[p.edge]
        i = self._vidx[j]
        via_tail = p.s + self._dist[self._vidx[e.tail], i]
        via_head = (self._lengths[p.edge] - p.s) + self._dist[self._vidx[e.head], i]
        return float(min(via_tail, via_head))

    def graph_distance(self, p: GraphPoint, q: GraphPoint):
        """Shortest-path metric d_Gamma between two graph points."""
        p = self.canonical(p)
        q = self.canonical(q)
        if p.is_vertex:
            return self._dist_to_vertex(q, p.vertex)
        if q.is_vertex:
            return self._dist_to_vertex(p, q.vertex)
        ep, eq = self.edges[p.edge], self.edges[q.edge]
        best = math.inf
        if p.edge == q.edge:
            best = abs(p.s - q.s)
        for sp, vp in ((p.s, ep.tail), (self._lengths[p.edge] - p.s, ep.head)):
            for sq, vq in ((q.s, eq.tail), (self._lengths[q.edge] - q.s, eq.head)):
                d = sp + self._dist[self._vidx[vp], self._vidx[vq]] + sq
                best = min(best, d)
        return float(best)

    def closest_vertex(self, p: GraphPoint):
        """Nearest vertex to a graph point; ties go to the smaller index."""
        best_j, best_d = None, math.inf
        for j in self._vid:
            d = self._dist_to_vertex(p, j)
            if d < best_d - _TIE_TOL:
                best_j, best_d = j, d
        return best_j, best_d

    # --- regimes and gluing ---

    def classify_vertex(self, j) -> Regime:
        """Compare r_j(eps)^d against eps^(d-1) through the exponent beta."""
        beta = self.vertices[j].radius_exp
        crit = (self.dimension - 1) / self.dimension
        if abs(beta - crit) <= 1e-12:
            return Regime.INTERMEDIATE
        if beta > crit:
            return Regime.SMALL
        return Regime.LARGE

    def skew_probabilities(self, j):
        """Exit-edge probabilities p_{j,k} proportional to lambda_k^(d-1).

        Returned in the order of incident_edges(j).
        """
        lams = np.array([self.edges[k].lam for k in self._incident[j]])
        w = lams ** (self.dimension - 1)
        return w / w.sum()

    def gluing_params(self, j) -> GluingParams:
        """Limiting vertex parameters by regime.

        Small: alpha = 0. Intermediate: alpha from the stickiness formula
        with the effective radius rho_j * c_j. Large: absorbing.
        """
        regime = self.classify_vertex(j)
        if regime is Regime.LARGE:
            return GluingParams(skew=np.array([]), alpha=0.0, absorbing=True)
        skew = self.skew_probabilities(j)
        if regime is Regime.SMALL:
            return GluingParams(skew=skew, alpha=0.0)
        v = self.vertices[j]
        lams = [self.edges[k].lam for k in self._incident[j]]
        alpha = stickiness_alpha(self.dimension, v.rho * v.radius_coeff, 1.0, lams)
        return GluingParams(skew=skew, alpha=alpha)


def stickiness_alpha(d, ball_radius, eps, lams):
    """ball_radius^d V_d / (sum_k lambda_k^(d-1) eps^(d-1) V_{d-1}).

    With ball_radius = rho * r(eps) this is the finite-eps stickiness
    alpha_j(eps); with ball_radius = rho * c and eps = 1 it is the
    intermediate-regime limit value.
    """
    lams = np.asarray(lams, dtype=float)
    num = ball_radius**d * _UNIT_BALL[d]
    den = float(np.sum(lams ** (d - 1))) * eps ** (d - 1) * _UNIT_BALL[d - 1]
    return num / den


def load_graph(path):
    """Read a graph description from a TOML file.

    Expected tables: [graph] dimension, [[vertex]] with id/position/rho/
    radius_coeff/radius_exp and [[edge]] with id/from/to/lambda.
    """
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    dim = raw.get("graph", {}).get("dimension", 2)
    vertices = [
        Vertex(
            id=int(v["id"]),
            position=np.asarray(v["position"], dtype=float),
            rho=float(v.get("rho", 1.0)),
            radius_coeff=float(v.get("radius_coeff", 1.0)),
            radius_exp=float(v.get("radius_exp", 0.75)),
        )
        for v in raw.get("vertex", [])
    ]
    edges = [
        Edge(
            id=int(e["id"]),
            tail=int(e["from"]),
            head=int(e["to"]),
            lam=float(e.get("lambda", 1.0)),
        )
        for e in raw.get("edge", [])
    ]
    return Graph(dim, vertices, edges)


def star_graph(d, lams, lengths, hub_rho=1.0, hub_exp=0.75, hub_coeff=1.0,
               leaf_exp=None, leaf_rho=None, leaf_coeff=None):
    """Convenience builder: hub at the origin, legs along fixed directions.

    Legs point along evenly spread unit vectors. Leaf ball parameters
    default to the hub's; leaf caps only matter as reflecting ends, so any
    radius that clears the local neck mouth does.
    """
    if leaf_exp is None:
        leaf_exp = hub_exp
    if leaf_rho is None:
        leaf_rho = hub_rho
    if leaf_coeff is None:
        leaf_coeff = hub_coeff
    lams = list(lams)
    lengths = list(lengths)
    n = len(lams)
    if len(lengths) != n:
        raise ValueError("lams and lengths must have equal length")
    dirs = []
    for i in range(n):
        if d == 2:
            th = 2.0 * math.pi * i / n
            dirs.append(np.array([math.cos(th), math.sin(th)]))
        else:
            th = 2.0 * math.pi * i / n
            phi = math.pi / 2 if n <= 2 else (math.pi / 3 + (i % 2) * math.pi / 3)
            dirs.append(np.array([
                math.sin(phi) * math.cos(th),
                math.sin(phi) * math.sin(th),
                math.cos(phi),
            ]))
    vertices = [Vertex(id=0, position=np.zeros(d), rho=hub_rho,
                       radius_coeff=hub_coeff, radius_exp=hub_exp)]
    edges = []
    for i, (lam, L, u) in enumerate(zip(lams, lengths, dirs)):
        vertices.append(Vertex(id=i + 1, position=L * u, rho=leaf_rho,
                               radius_coeff=leaf_coeff, radius_exp=leaf_exp))
        edges.append(Edge(id=i, tail=0, head=i + 1, lam=lam))
    return Graph(d, vertices, edges)
