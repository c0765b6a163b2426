"""Narrow tube domains around embedded metric graphs.

The domain at width parameter eps is the union of vertex balls of radius
R_j = rho_j r_j(eps), edge cylinders of radius lambda_k eps, and junction
fillets that smooth the cusp where a cylinder meets a ball. All queries
(membership, projection, normals, shells) are pointwise and exact up to
floating point; nothing is meshed.

Axial coordinates along an edge are measured from the tail (lower-indexed)
vertex unless a vertex is named explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from narrowtube.graph import Graph, GraphPoint, unit_ball_volume

_MEMBER_TOL = 1e-10
_GRID = 2001


class GeometryError(ValueError):
    """Raised when a requested tube cannot be built soundly."""


def _hermite_quintic(w, v0, s0, c0, v1, s1, c1):
    """Coefficients of the degree-5 polynomial on [0, w] matching value,
    slope and curvature at both ends."""
    A = np.zeros((6, 6))
    A[0, 0] = 1.0
    A[1, 1] = 1.0
    A[2, 2] = 2.0
    for i in range(6):
        A[3, i] = w**i
        if i >= 1:
            A[4, i] = i * w ** (i - 1)
        if i >= 2:
            A[5, i] = i * (i - 1) * w ** (i - 2)
    return np.linalg.solve(A, np.array([v0, s0, c0, v1, s1, c1], dtype=float))


def _hermite_cubic(w, v0, s0, v1, s1):
    c = np.zeros(6)
    c[0] = v0
    c[1] = s0
    c[2] = (3.0 * (v1 - v0) / w - 2.0 * s0 - s1) / w
    c[3] = (2.0 * (v0 - v1) / w + s0 + s1) / w**2
    return c


def _polyval_local(coefs, x):
    y = np.zeros_like(np.asarray(x, dtype=float))
    for c in coefs[::-1]:
        y = y * x + c
    return y


def _polyder_local(coefs, x):
    y = np.zeros_like(np.asarray(x, dtype=float))
    for i in range(len(coefs) - 1, 0, -1):
        y = y * x + i * coefs[i]
    return y


@dataclass(frozen=True)
class FilletProfile:
    """Radius profile of a junction fillet on [x_start, x_end].

    Piecewise polynomial (one or two pieces, degree <= 5) stored against the
    local variable x - breaks[i]. ``fallback`` marks edges where the plain
    two-point blend violated its shape constraints and a monotone two-piece
    construction with the same endpoint value/slope data was used instead.
    """

    kind: str
    breaks: np.ndarray
    coefs: np.ndarray
    tube_r: float
    fallback: bool

    @property
    def x_start(self):
        return float(self.breaks[0])

    @property
    def x_end(self):
        return float(self.breaks[-1])

    def _piece(self, x):
        return np.clip(np.searchsorted(self.breaks[1:-1], x, side="right"), 0,
                       len(self.coefs) - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = self._piece(x)
        out = np.empty_like(x)
        for i in range(len(self.coefs)):
            m = idx == i
            if np.any(m):
                out[m] = _polyval_local(self.coefs[i], x[m] - self.breaks[i])
        return out if out.ndim else float(out)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        idx = self._piece(x)
        out = np.empty_like(x)
        for i in range(len(self.coefs)):
            m = idx == i
            if np.any(m):
                out[m] = _polyder_local(self.coefs[i], x[m] - self.breaks[i])
        return out if out.ndim else float(out)

    @property
    def max_radius(self):
        return float(self(self.x_start))


def _shape_ok(breaks, coefs, tube_r):
    """Nonincreasing and never below the cylinder radius (end tangency aside)."""
    xs = np.linspace(breaks[0], breaks[-1], _GRID)
    prof = FilletProfile("probe", breaks, coefs, tube_r, False)
    vals = prof(xs)
    tol = 1e-9 * tube_r
    if np.any(np.diff(vals) > tol):
        return False
    if np.any(vals < tube_r - tol):
        return False
    return True


def make_fillet(R, lam, eps, kind="quintic"):
    """Fillet profile between a ball of radius R and a cylinder of radius
    lambda*eps.

    The profile starts at x' = sqrt(R^2 - (2 lam eps)^2), where the ball
    surface sits at transverse distance 2 lam eps, with the ball's value and
    slope (and curvature, for the quintic kind), and lands flat on the
    cylinder radius at x'' = R + eps/2. When the two-point blend is not
    monotone or undercuts the cylinder radius (steep mouths do this), a
    monotone C1 two-piece cubic with the same endpoint value/slope data is
    substituted; the interior knot follows a Fritsch-Carlson safe choice.
    """
    tube_r = lam * eps
    mouth = 2.0 * tube_r
    if R <= mouth:
        raise GeometryError(f"ball radius {R} must exceed mouth width {mouth}")
    xq = math.sqrt(R * R - mouth * mouth)
    xqq = R + eps / 2.0
    w = xqq - xq
    s0 = -xq / mouth
    c0 = -R * R / mouth**3

    if kind == "quintic":
        coefs = np.vstack([_hermite_quintic(w, mouth, s0, c0, tube_r, 0.0, 0.0)])
    elif kind == "cubic":
        coefs = np.vstack([_hermite_cubic(w, mouth, s0, tube_r, 0.0)])
    else:
        raise ValueError(f"unknown fillet kind {kind!r}")
    breaks = np.array([xq, xqq])
    if _shape_ok(breaks, coefs, tube_r):
        return FilletProfile(kind, breaks, coefs, tube_r, False)

    # monotone fallback; S is the left slope in units of drop per width
    drop = mouth - tube_r
    S = abs(s0) * w / drop
    if S <= 3.0:
        breaks = np.array([xq, xqq])
        coefs = np.vstack([_hermite_cubic(w, mouth, s0, tube_r, 0.0)])
    else:
        u1 = 1.4 / S
        g1 = 0.5
        sm = -min(S / 10.0, 1.2) * drop / w
        x_mid = xq + u1 * w
        v_mid = tube_r + g1 * drop
        breaks = np.array([xq, x_mid, xqq])
        coefs = np.vstack([
            _hermite_cubic(x_mid - xq, mouth, s0, v_mid, sm),
            _hermite_cubic(xqq - x_mid, v_mid, sm, tube_r, 0.0),
        ])
    if not _shape_ok(breaks, coefs, tube_r):
        raise GeometryError("fillet fallback failed shape validation")
    return FilletProfile(kind, breaks, coefs, tube_r, True)


@dataclass(frozen=True)
class ShellSpec:
    """Stopping surface at graph distance delta from a vertex."""

    vertex: int
    delta: float
    edge: int | None = None


@dataclass(frozen=True)
class LocalCoord:
    vertex: int
    edge: int
    axial: float
    transverse: np.ndarray


class TubeDomain:
    """Geometric realization of the tube around a graph at a given eps."""

    def __init__(self, graph: Graph, epsilon, profile_kind="quintic"):
        if epsilon <= 0:
            raise GeometryError("epsilon must be positive")
        self.graph = graph
        self.epsilon = float(epsilon)
        self.profile_kind = profile_kind
        self.d = graph.dimension

        self.ball_radius = {
            j: v.ball_radius(self.epsilon) for j, v in graph.vertices.items()
        }

        eps = self.epsilon
        for j, R in self.ball_radius.items():
            lam_max = max(graph.edges[k].lam for k in graph.incident_edges(j))
            if R <= 2.0 * lam_max * eps:
                raise GeometryError(
                    f"vertex {j}: ball radius {R:.4g} does not clear the "
                    f"widest neck mouth {2 * lam_max * eps:.4g}; eps too large"
                )

        self.fillets = {}
        for j in graph.vertices:
            R = self.ball_radius[j]
            for k in graph.incident_edges(j):
                self.fillets[(j, k)] = make_fillet(
                    R, graph.edges[k].lam, eps, profile_kind
                )

        for k, e in graph.edges.items():
            L = graph.edge_length(k)
            reach = (self.fillets[(e.tail, k)].x_end
                     + self.fillets[(e.head, k)].x_end)
            if reach >= L:
                raise GeometryError(
                    f"edge {k}: junction zones overlap (length {L:.4g}, "
                    f"joint reach {reach:.4g})"
                )
            both = (self.ball_radius[e.tail] + 3 * eps
                    + self.ball_radius[e.head] + 3 * eps)
            if both >= L:
                raise GeometryError(
                    f"edge {k}: standard shells of its endpoints overlap"
                )

        self._check_mouth_clearance()
        self._frames = {}
        self._pack_cache = None

    def _check_mouth_clearance(self):
        """Mouths widened to the fillet envelope must not overlap: the
        angular half-width of each sleeve, seen from the vertex, shrinks
        with axial distance, so disjointness at the mouth rim is enough."""
        g = self.graph
        for j in g.vertices:
            ks = g.incident_edges(j)
            half = {}
            for k in ks:
                f = self.fillets[(j, k)]
                half[k] = math.atan2(f.max_radius, f.x_start)
            for i, k1 in enumerate(ks):
                for k2 in ks[i + 1:]:
                    u1 = g.direction_from(j, k1)
                    u2 = g.direction_from(j, k2)
                    angle = math.acos(float(np.clip(np.dot(u1, u2), -1, 1)))
                    if half[k1] + half[k2] >= angle:
                        raise GeometryError(
                            f"vertex {j}: sleeves of edges {k1} and {k2} "
                            f"overlap outside the ball "
                            f"({half[k1] + half[k2]:.3f} rad vs {angle:.3f})"
                        )

    # --- frames and coordinates ---

    def frame(self, j, k):
        """Orthonormal frame (u, n1[, n2]) with u pointing from j along k."""
        key = (j, k)
        if key not in self._frames:
            u = self.graph.direction_from(j, k)
            ref = np.zeros(self.d)
            ref[int(np.argmin(np.abs(u)))] = 1.0
            n1 = ref - np.dot(ref, u) * u
            n1 /= np.linalg.norm(n1)
            if self.d == 2:
                self._frames[key] = (u, (n1,))
            else:
                n2 = np.cross(u, n1)
                n2 /= np.linalg.norm(n2)
                self._frames[key] = (u, (n1, n2))
        return self._frames[key]

    def _edge_foot(self, z, k):
        """(arclength of the nearest point on edge k, squared distance)."""
        g = self.graph
        e = g.edges[k]
        A = g.position_of_vertex(e.tail)
        u = g.edge_unit(k)
        s = float(np.clip(np.dot(z - A, u), 0.0, g.edge_length(k)))
        dz = z - (A + s * u)
        return s, float(np.dot(dz, dz))

    def project(self, z) -> GraphPoint:
        """Nearest graph point (defined on all of R^d); exact ties go to the
        least edge index."""
        z = np.asarray(z, dtype=float)
        best = None
        best_d2 = math.inf
        for k in sorted(self.graph.edges):
            s, d2 = self._edge_foot(z, k)
            if d2 < best_d2 - 1e-15 * (1.0 + d2):
                best = GraphPoint.on_edge(k, s)
                best_d2 = d2
        return self.graph.canonical(best)

    def project_eps(self, z) -> GraphPoint:
        """Projection that spreads a vertex collar back over the graph.

        Outside every (R_j + 2 eps)-collar it is the plain projection; the
        collar [R_j - 2 eps, R_j + 2 eps] is stretched linearly onto
        [0, R_j + 2 eps]; everything closer maps to the vertex itself.
        """
        p = self.project(z)
        eps = self.epsilon
        g = self.graph
        for j in sorted(g.vertices):
            R = self.ball_radius[j]
            dj = g.graph_distance(p, GraphPoint.at_vertex(j))
            if dj >= R + 2 * eps:
                continue
            if dj <= R - 2 * eps:
                return GraphPoint.at_vertex(j)
            stretched = ((R + 2 * eps) * dj - (R * R - 4 * eps * eps)) / (4 * eps)
            if p.is_vertex:  # dj == 0 handled above; defensive
                return GraphPoint.at_vertex(j)
            e = g.edges[p.edge]
            if e.tail == j:
                return GraphPoint.on_edge(p.edge, stretched)
            return GraphPoint.on_edge(p.edge, g.edge_length(p.edge) - stretched)
        return p

    def local_coordinates(self, z) -> LocalCoord:
        z = np.asarray(z, dtype=float)
        p = self.project(z)
        j, _ = self.graph.closest_vertex(p)
        if p.is_vertex:
            k = self.graph.incident_edges(p.vertex)[0]
        else:
            k = p.edge
            if j not in (self.graph.edges[k].tail, self.graph.edges[k].head):
                # projection landed on a far edge; use the nearest incident one
                k = self.graph.incident_edges(j)[0]
        u, normals = self.frame(j, k)
        w = z - self.graph.position_of_vertex(j)
        ax = float(np.dot(w, u))
        tr = np.array([float(np.dot(w, n)) for n in normals])
        return LocalCoord(vertex=j, edge=k, axial=ax, transverse=tr)

    def from_local(self, lc: LocalCoord):
        u, normals = self.frame(lc.vertex, lc.edge)
        z = self.graph.position_of_vertex(lc.vertex) + lc.axial * u
        for y, n in zip(lc.transverse, normals):
            z = z + y * n
        return z

    # --- membership ---

    def contains(self, z) -> bool:
        z = np.asarray(z, dtype=float)
        g = self.graph
        for j, R in self.ball_radius.items():
            w = z - g.position_of_vertex(j)
            if np.dot(w, w) <= R * R:
                return True
        for k in g.edges:
            e = g.edges[k]
            A = g.position_of_vertex(e.tail)
            u = g.edge_unit(k)
            w = z - A
            ax = float(np.dot(w, u))
            if not 0.0 <= ax <= g.edge_length(k):
                continue
            t2 = float(np.dot(w, w)) - ax * ax
            r = g.edges[k].lam * self.epsilon
            if t2 <= r * r:
                return True
        for (j, k), f in self.fillets.items():
            u = g.direction_from(j, k)
            w = z - g.position_of_vertex(j)
            ax = float(np.dot(w, u))
            if not f.x_start <= ax <= f.x_end:
                continue
            t2 = float(np.dot(w, w)) - ax * ax
            rr = f(ax)
            if t2 <= rr * rr:
                return True
        return False

    def contains_many(self, zs):
        """Vectorized membership for an (n, d) array of points."""
        zs = np.asarray(zs, dtype=float)
        g = self.graph
        inside = np.zeros(len(zs), dtype=bool)
        for j, R in self.ball_radius.items():
            w = zs - g.position_of_vertex(j)
            inside |= np.einsum("ij,ij->i", w, w) <= R * R
        for k in g.edges:
            e = g.edges[k]
            w = zs - g.position_of_vertex(e.tail)
            ax = w @ g.edge_unit(k)
            t2 = np.einsum("ij,ij->i", w, w) - ax * ax
            r = g.edges[k].lam * self.epsilon
            inside |= (ax >= 0) & (ax <= g.edge_length(k)) & (t2 <= r * r)
        for (j, k), f in self.fillets.items():
            w = zs - g.position_of_vertex(j)
            ax = w @ g.direction_from(j, k)
            band = (ax >= f.x_start) & (ax <= f.x_end)
            if np.any(band):
                t2 = np.einsum("ij,ij->i", w, w) - ax * ax
                rr = np.zeros(len(zs))
                rr[band] = f(ax[band])
                inside |= band & (t2 <= rr * rr)
        return inside

    # --- normals ---

    def inward_normal(self, z, tol=1e-7):
        """Unit inward normal at a boundary point of the union.

        Candidate surfaces (ball, cylinder wall, fillet) are screened by
        their own distance margins, then validated by probing: inside on the
        + side, outside on the - side. Corner points (measure zero) fall
        back to the averaged candidate.
        """
        z = np.asarray(z, dtype=float)
        g = self.graph
        cands = []
        for j in sorted(self.ball_radius):
            R = self.ball_radius[j]
            w = z - g.position_of_vertex(j)
            r = float(np.linalg.norm(w))
            if r > 0 and abs(r - R) <= tol:
                cands.append(-w / r)
        for k in sorted(g.edges):
            e = g.edges[k]
            A = g.position_of_vertex(e.tail)
            u = g.edge_unit(k)
            w = z - A
            ax = float(np.dot(w, u))
            if not -tol <= ax <= g.edge_length(k) + tol:
                continue
            trv = w - ax * u
            tr = float(np.linalg.norm(trv))
            r = g.edges[k].lam * self.epsilon
            if tr > 0 and abs(tr - r) <= tol:
                cands.append(-trv / tr)
        for (j, k) in sorted(self.fillets):
            f = self.fillets[(j, k)]
            u = g.direction_from(j, k)
            w = z - g.position_of_vertex(j)
            ax = float(np.dot(w, u))
            if not f.x_start - tol <= ax <= f.x_end + tol:
                continue
            trv = w - ax * u
            tr = float(np.linalg.norm(trv))
            axc = float(np.clip(ax, f.x_start, f.x_end))
            dp = float(f.deriv(axc))
            slope = math.sqrt(1.0 + dp * dp)
            if tr > 0 and abs(tr - f(axc)) <= tol * 10 * slope:
                n = (dp * u - trv / tr) / slope
                cands.append(n)
        probe = max(10 * tol, 1e-9)
        for n in cands:
            if self.contains(z + probe * n) and not self.contains(z - probe * n):
                return n
        if cands:
            n = np.mean(cands, axis=0)
            nn = float(np.linalg.norm(n))
            if nn > 0:
                n = n / nn
                if self.contains(z + probe * n):
                    return n
        raise GeometryError("point is not within tolerance of the boundary")

    # --- shells ---

    def validate_shell(self, spec: ShellSpec):
        g = self.graph
        j = spec.vertex
        if j not in g.vertices:
            raise GeometryError(f"unknown vertex {j}")
        eps = self.epsilon
        lo = self.ball_radius[j] + 3 * eps
        if spec.delta < lo - 1e-12:
            raise GeometryError(
                f"shell radius {spec.delta} inside the standard collar {lo:.4g}"
            )
        for k in g.incident_edges(j):
            other = g.other_endpoint(k, j)
            room = g.edge_length(k) - (self.ball_radius[other] + 3 * eps)
            if spec.delta > room + 1e-12:
                raise GeometryError(
                    f"shell radius {spec.delta} runs into vertex {other} "
                    f"along edge {k} (room {room:.4g})"
                )
        if spec.edge is not None and spec.edge not in g.incident_edges(j):
            raise GeometryError(f"edge {spec.edge} not incident to vertex {j}")

    def shell_membership(self, z, spec: ShellSpec, band=0.0):
        """Classify z against the shell: -1 inside, 0 on (within band),
        +1 outside. Also returns the edge owning the projection."""
        p = self.project(z)
        dj = self.graph.graph_distance(p, GraphPoint.at_vertex(spec.vertex))
        edge = p.edge if not p.is_vertex else None
        if abs(dj - spec.delta) <= band:
            return 0, edge
        return (-1 if dj < spec.delta else 1), edge

    def sample_shell(self, j, delta, rng, n, edge=None):
        """Uniform sample on the shell at graph distance delta from j.

        Cross-section measure is proportional to lambda_k^(d-1), so edges
        are picked with the skew weights; transverse positions are uniform
        on the segment (d=2) or disk (d=3).
        """
        self.validate_shell(ShellSpec(vertex=j, delta=delta, edge=edge))
        g = self.graph
        ks = g.incident_edges(j) if edge is None else [edge]
        lams = np.array([g.edges[k].lam for k in ks])
        w = lams ** (self.d - 1)
        w = w / w.sum()
        idx = rng.choice(len(ks), size=n, p=w)
        pts = np.empty((n, self.d))
        edges_out = np.empty(n, dtype=np.int64)
        for i, ki in enumerate(idx):
            k = ks[ki]
            u, normals = self.frame(j, k)
            r = g.edges[k].lam * self.epsilon
            base = g.position_of_vertex(j) + delta * u
            if self.d == 2:
                y = rng.uniform(-r, r)
                pts[i] = base + y * normals[0]
            else:
                while True:
                    y1, y2 = rng.uniform(-r, r, size=2)
                    if y1 * y1 + y2 * y2 <= r * r:
                        break
                pts[i] = base + y1 * normals[0] + y2 * normals[1]
            edges_out[i] = k
        return pts, edges_out

    # --- volumes ---

    def region_volume(self, region):
        """Exact volume of a named region.

        region is a tuple: ("ball", j), ("cylinder", k), ("slab", k, a, b)
        with axial arclength window [a, b] measured from the tail vertex and
        required to avoid both junction zones, or ("domain",) for the whole
        tube (junction extras integrated numerically to 1e-10).
        """
        g = self.graph
        eps = self.epsilon
        kind = region[0]
        if kind == "ball":
            R = self.ball_radius[region[1]]
            return unit_ball_volume(self.d) * R**self.d
        if kind == "cylinder":
            k = region[1]
            r = g.edges[k].lam * eps
            return g.edge_length(k) * self._cross_section(r)
        if kind == "slab":
            k, a, b = region[1], region[2], region[3]
            e = g.edges[k]
            lo = self.fillets[(e.tail, k)].x_end
            hi = g.edge_length(k) - self.fillets[(e.head, k)].x_end
            if not lo <= a <= b <= hi:
                raise GeometryError("slab must sit inside the pure cylinder zone")
            r = g.edges[k].lam * eps
            return (b - a) * self._cross_section(r)
        if kind == "domain":
            return self._total_volume()
        raise ValueError(f"unknown region kind {kind!r}")

    def _cross_section(self, r):
        return unit_ball_volume(self.d - 1) * r ** (self.d - 1)

    def _width(self, r):
        if self.d == 2:
            return 2.0 * r
        return math.pi * r * r

    def _total_volume(self):
        g = self.graph
        total = sum(unit_ball_volume(self.d) * R**self.d
                    for R in self.ball_radius.values())
        for k, e in g.edges.items():
            r = g.edges[k].lam * self.epsilon
            lo = self.fillets[(e.tail, k)].x_end
            hi = g.edge_length(k) - self.fillets[(e.head, k)].x_end
            total += (hi - lo) * self._width(r)
            for j in (e.tail, e.head):
                f = self.fillets[(j, k)]
                R = self.ball_radius[j]
                xs = np.linspace(f.x_start, f.x_end, 4001)
                prof = np.maximum(f(xs), r)
                chord = np.sqrt(np.clip(R * R - xs * xs, 0.0, None))
                extra = np.maximum(self._width_arr(prof) - self._width_arr(
                    np.minimum(chord, prof)), 0.0)
                total += float(np.trapezoid(extra, xs))
        return total

    def _width_arr(self, r):
        if self.d == 2:
            return 2.0 * r
        return math.pi * r * r

    def bounding_box(self, pad=0.0):
        g = self.graph
        pos = np.array([v.position for v in g.vertices.values()])
        lo = pos.min(axis=0)
        hi = pos.max(axis=0)
        margin = max(self.ball_radius.values()) + pad
        return lo - margin, hi + margin

    # --- packed geometry for the step kernels ---

    def kernel_pack(self):
        """Flat arrays describing the domain for the jitted steppers."""
        if self._pack_cache is not None:
            return self._pack_cache
        g = self.graph
        vids = sorted(g.vertices)
        eids = sorted(g.edges)
        vindex = {j: i for i, j in enumerate(vids)}
        eindex = {k: i for i, k in enumerate(eids)}
        verts = np.array([g.position_of_vertex(j) for j in vids], dtype=float)
        R = np.array([self.ball_radius[j] for j in vids], dtype=float)
        A = np.array([g.position_of_vertex(g.edges[k].tail) for k in eids])
        U = np.array([g.edge_unit(k) for k in eids])
        L = np.array([g.edge_length(k) for k in eids])
        lamr = np.array([g.edges[k].lam * self.epsilon for k in eids])
        zone_lo = np.array([self.fillets[(g.edges[k].tail, k)].x_end
                            for k in eids])
        zone_hi = np.array([g.edge_length(k)
                            - self.fillets[(g.edges[k].head, k)].x_end
                            for k in eids])
        items = sorted(self.fillets)
        nf = len(items)
        fil_vert = np.empty(nf, dtype=np.int64)
        fil_edge = np.empty(nf, dtype=np.int64)
        fil_x0 = np.empty(nf)
        fil_x1 = np.empty(nf)
        fil_nb = np.empty(nf, dtype=np.int64)
        fil_breaks = np.zeros((nf, 3))
        fil_coefs = np.zeros((nf, 2, 6))
        for i, (j, k) in enumerate(items):
            f = self.fillets[(j, k)]
            fil_vert[i] = vindex[j]
            fil_edge[i] = eindex[k]
            fil_x0[i] = f.x_start
            fil_x1[i] = f.x_end
            npieces = len(f.coefs)
            fil_nb[i] = npieces
            fil_breaks[i, : npieces + 1] = f.breaks
            fil_coefs[i, :npieces, :] = f.coefs
        pack = {
            "d": self.d,
            "verts": verts,
            "R": R,
            "A": A,
            "U": U,
            "L": L,
            "lamr": lamr,
            "zone_lo": zone_lo,
            "zone_hi": zone_hi,
            "fil_vert": fil_vert,
            "fil_edge": fil_edge,
            "fil_x0": fil_x0,
            "fil_x1": fil_x1,
            "fil_nb": fil_nb,
            "fil_breaks": fil_breaks,
            "fil_coefs": fil_coefs,
            "vids": vids,
            "eids": eids,
        }
        self._pack_cache = pack
        return pack

    # --- mesh export ---

    def export_obj(self, path, axial_segments=64, angular_segments=24):
        """Write a surface mesh (d=3) or boundary polylines (d=2) as OBJ."""
        g = self.graph
        lines = ["# narrowtube boundary export"]
        vcount = 0
        for k in sorted(g.edges):
            e = g.edges[k]
            samples = []
            Lk = g.edge_length(k)
            for j in (e.tail, e.head):
                f = self.fillets[(j, k)]
                xs = np.linspace(f.x_start, f.x_end, axial_segments // 2)
                for x in xs:
                    s = x if j == e.tail else Lk - x
                    samples.append((s, float(f(x))))
            lo = self.fillets[(e.tail, k)].x_end
            hi = Lk - self.fillets[(e.head, k)].x_end
            r = g.edges[k].lam * self.epsilon
            for x in np.linspace(lo, hi, axial_segments):
                samples.append((x, r))
            samples.sort()
            frame_t = self.frame(e.tail, k)
            rows = []
            A0 = g.position_of_vertex(e.tail)
            u0 = g.edge_unit(k)
            for s, rad in samples:
                normals = frame_t[1]
                base = A0 + s * u0
                if self.d == 2:
                    for sgn in (1.0, -1.0):
                        rows.append(base + sgn * rad * normals[0])
                else:
                    n1, n2 = frame_t[1]
                    ring = []
                    for t in np.linspace(0, 2 * math.pi, angular_segments,
                                         endpoint=False):
                        ring.append(base + rad * (math.cos(t) * n1
                                                  + math.sin(t) * n2))
                    rows.append(ring)
            if self.d == 2:
                for p in rows:
                    lines.append("v " + " ".join(f"{c:.8f}" for c in p) + " 0.0")
                    vcount += 1
            else:
                start = vcount
                for ring in rows:
                    for p in ring:
                        lines.append("v " + " ".join(f"{c:.8f}" for c in p))
                        vcount += 1
                nr = len(rows)
                for i in range(nr - 1):
                    for a in range(angular_segments):
                        b = (a + 1) % angular_segments
                        i0 = start + i * angular_segments
                        i1 = start + (i + 1) * angular_segments
                        lines.append(f"f {i0+a+1} {i0+b+1} {i1+b+1} {i1+a+1}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return vcount
