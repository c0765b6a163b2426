"""Estimators and closed-form predictors for shell-exit experiments.

Predictions come from the stickiness constant alpha(eps) of the junction
ball: the mean time to reach the distance-delta shell from the vertex is
delta^2/2 + alpha(eps) delta, the matching exponential rate scale is
alpha(eps) delta, and exit edges follow the lambda^(d-1) skew weights.
Estimators exclude timed-out paths, report the exclusion count, and abort
if more than 0.1% of paths were excluded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from narrowtube.graph import stickiness_alpha

_Z95 = 1.959963984540054
_MAX_EXCLUDED = 1e-3


@dataclass(frozen=True)
class Summary:
    """Sample summary of exit times: moments, normal CI, label counts."""

    n: int
    mean: float
    variance: float
    ci95: float
    freqs: dict = field(default_factory=dict)
    ks: float | None = None
    n_excluded: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("summary needs at least one record")
        if self.variance < 0:
            raise ValueError("variance must be non-negative")
        if self.freqs:
            total = sum(f for f, _ in self.freqs.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError("label frequencies must sum to 1")


@dataclass(frozen=True)
class Prediction:
    """Vertex-shell exit law to leading order in eps."""

    alpha_eps: float
    mean_exit: float
    rate_scale: float
    skew: dict

    def __post_init__(self):
        if min(self.alpha_eps, self.mean_exit, self.rate_scale) < 0:
            raise ValueError("prediction fields must be non-negative")
        if any(p < 0 for p in self.skew.values()):
            raise ValueError("skew probabilities must be non-negative")


def predict(dom, j, delta):
    """Exit-law prediction for the distance-delta shell around vertex j."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    g = dom.graph
    d = g.dimension
    lams = [g.edges[k].lam for k in g.incident_edges(j)]
    alpha = stickiness_alpha(d, dom.ball_radius[j], dom.epsilon, lams)
    skew = dict(zip(g.incident_edges(j), g.skew_probabilities(j)))
    return Prediction(
        alpha_eps=alpha,
        mean_exit=0.5 * delta * delta + alpha * delta,
        rate_scale=alpha * delta,
        skew=skew,
    )


def _valid(records):
    """Split out timed-out paths; abort when they are not negligible."""
    good = [r for r in records if r.code != "timeout"]
    n_exc = len(records) - len(good)
    if records and n_exc > _MAX_EXCLUDED * len(records):
        raise RuntimeError(
            f"{n_exc} of {len(records)} paths timed out; run is unusable"
        )
    return good, n_exc


def _wilson(k, n, z=_Z95):
    """Wilson score interval for a binomial proportion."""
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def summarize_exit_times(records):
    """Mean/variance/CI of exit times plus exit-code frequencies."""
    good, n_exc = _valid(records)
    if len(good) < 2:
        raise ValueError("need at least two valid records")
    t = np.array([r.sigma for r in good])
    n = len(t)
    var = float(t.var(ddof=1))
    codes = sorted({r.code for r in good})
    freqs = {}
    for c in codes:
        k = sum(r.code == c for r in good)
        freqs[c] = (k / n, _wilson(k, n))
    return Summary(
        n=n,
        mean=float(t.mean()),
        variance=var,
        ci95=_Z95 * math.sqrt(var / n),
        freqs=freqs,
        n_excluded=n_exc,
    )


def ratio_to_prediction(records, pred):
    """Mean exit time over the predicted mean, with a delta-method CI."""
    s = summarize_exit_times(records)
    ratio = s.mean / pred.mean_exit
    return ratio, s.ci95 / pred.mean_exit


def summarize_exit_places(records, edges=None):
    """Per-edge exit frequencies with Wilson CIs.

    All records must target the same vertex shell; when the incident edge
    ids are supplied, a label outside them means corrupted data.
    """
    good, _ = _valid(records)
    if not good:
        raise ValueError("no valid records")
    verts = {r.vertex for r in good}
    if len(verts) != 1:
        raise ValueError(f"records target different vertices: {sorted(verts)}")
    labels = [r.edge for r in good]
    if edges is not None:
        bad = set(labels) - set(edges)
        if bad:
            raise ValueError(f"exit edges {sorted(bad)} are not incident")
    n = len(labels)
    keys = list(edges) if edges is not None else sorted(set(labels))
    out = {}
    for k in keys:
        cnt = labels.count(k)
        out[k] = (cnt / n, _wilson(cnt, n))
    return out


def ks_exponential(records, rate_scale):
    """One-sample KS statistic of sigma/rate_scale against Exp(1)."""
    if rate_scale <= 0:
        raise ValueError("rate scale must be positive")
    good, _ = _valid(records)
    if len(good) < 50:
        raise ValueError("KS statistic needs at least 50 records")
    x = np.sort([r.sigma for r in good]) / rate_scale
    n = len(x)
    cdf = 1.0 - np.exp(-x)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def mgf_estimate(records, lam):
    """Sample mean of exp(-lam sigma) with a normal CI."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    good, _ = _valid(records)
    if not good:
        raise ValueError("no valid records")
    if lam == 0:
        return 1.0, 0.0
    v = np.exp(-lam * np.array([r.sigma for r in good]))
    n = len(v)
    se = v.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    return float(v.mean()), _Z95 * se


def _groups_as_lists(groups):
    if hasattr(groups, "values"):
        return list(groups.values())
    return list(groups)


def second_moment_check(groups, min_records=100):
    """Second moments against twice the squared largest mean.

    Every start group must satisfy E[sigma^2] <= 2 (max_g E sigma)^2 up to
    three combined standard errors. Returns (passed, margin); margin is
    the worst ratio of left side to tolerance-inflated right side.
    """
    parts = _groups_as_lists(groups)
    if len(parts) < 2:
        raise ValueError("need at least two start groups")
    times = []
    for part in parts:
        good, _ = _valid(part)
        if len(good) < min_records:
            raise ValueError(f"group has {len(good)} < {min_records} records")
        times.append(np.array([r.sigma for r in good]))
    means = np.array([t.mean() for t in times])
    g_max = int(means.argmax())
    v_max = means[g_max]
    se_max = times[g_max].std(ddof=1) / math.sqrt(len(times[g_max]))
    margin = 0.0
    for t in times:
        sq = t * t
        m2 = sq.mean()
        se2 = sq.std(ddof=1) / math.sqrt(len(sq))
        rel = 3.0 * math.sqrt((se2 / m2) ** 2 + (2.0 * se_max / v_max) ** 2)
        margin = max(margin, m2 / (2.0 * v_max * v_max * (1.0 + rel)))
    return margin <= 1.0, margin


def continuity_gap(groups, ball_radius, eps, d):
    """Largest pairwise mean-exit gap, normalized by max(r^d/eps^(d-1), 1)."""
    parts = _groups_as_lists(groups)
    if len(parts) < 2:
        raise ValueError("need at least two start groups")
    means = []
    for part in parts:
        good, _ = _valid(part)
        if not good:
            raise ValueError("empty start group")
        means.append(np.mean([r.sigma for r in good]))
    gap = max(means) - min(means)
    return gap / max(ball_radius**d / eps ** (d - 1), 1.0)


def apriori_bound_check(records, kind, ball_radius, eps, d, delta=None):
    """Mean exit time divided by its order-of-magnitude bound.

    kind "ball": time to leave the ball's own neighborhood, bound
    r^2 ln(r/eps) in d=2 and r^d/eps^(d-2) otherwise. kind "connect":
    cross-junction transit, bound r^d/eps^(d-2). kind "neck": reaching
    the distance-delta shell, bound delta^2 + (r^d/eps^(d-1)) delta.
    The paper-side constants are unknown, so callers track the ratio
    across an eps-sweep instead of asserting a level.
    """
    good, _ = _valid(records)
    if not good:
        raise ValueError("no valid records")
    r = ball_radius
    if kind == "ball":
        bound = r * r * math.log(r / eps) if d == 2 else r**d / eps ** (d - 2)
    elif kind == "connect":
        bound = r**d / eps ** (d - 2)
    elif kind == "neck":
        if delta is None:
            raise ValueError("neck bound needs delta")
        bound = delta * delta + (r**d / eps ** (d - 1)) * delta
    else:
        raise ValueError(f"unknown bound kind {kind!r}")
    if bound <= 0:
        raise ValueError("bound is not positive for these parameters")
    return float(np.mean([r_.sigma for r_ in good]) / bound)
