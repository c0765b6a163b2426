"""Experiment runner: TOML configs in, JSON and CSV results out.

One config file describes one experiment: the graph file, the tube scale
(or scales, for a sweep), shell radii, path counts, and the thresholds
its assertions are checked against.  ``narrowtube run`` executes it and
writes ``results.json`` plus CSV tables into the output directory,
returning exit code 0 exactly when every enabled assertion passed, 1 on
an assertion failure or runtime error, and 2 when the config does not
validate.  ``narrowtube validate`` reports config diagnostics without
running anything.

All randomness flows from the single config seed.  Worker count affects
scheduling only: path batches are chunked at a fixed size and their
records concatenated in chunk order, so results are identical for any
``--workers`` value.
"""

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import exitstats, graphdiff, oracle1d, qsd
from .graph import GraphPoint, load_graph
from .rbm import (ShellTarget, SimConfig, batch_exits, run_occupation,
                  run_to_time)
from .tube import GeometryError, TubeDomain

SCHEMA_VERSION = 1
KINDS = ("exit-stats", "exit-place", "exponential-law", "qsd", "dobrushin",
         "graph-sim", "compare-marginals", "resolvent", "apriori-sweep")

_Z95 = 1.959963984540054
_CHUNK = 4096
_log = logging.getLogger("narrowtube")


def _bonferroni_z(m, level=0.05):
    """Two-sided normal quantile for m simultaneous 95% checks."""
    from scipy.stats import norm

    return float(norm.ppf(1.0 - level / (2 * m)))


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: what to run, on which geometry, and where to write.

    Kind-specific knobs (step factors, thresholds, horizons) live in
    options; see the per-kind runners for the recognized keys.
    """

    kind: str
    graph: str
    eps: tuple
    delta: float | None
    delta_prime: float | None
    vertex: int
    n_paths: int
    seed: int
    out: str
    options: dict = field(default_factory=dict)


_CORE_KEYS = {"kind", "graph", "eps", "delta", "delta_prime", "vertex",
              "n_paths", "seed", "out"}


def load_spec(path, out_override=None):
    """Parse a config file into an ExperimentSpec.

    The graph path is resolved relative to the config file; the output
    directory defaults to results/<config stem> under the working
    directory unless the file or the caller names one.
    """
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    exp = raw.get("experiment", {})
    base = os.path.dirname(os.path.abspath(path))
    graph = exp.get("graph", "")
    if graph and not os.path.isabs(graph):
        graph = os.path.join(base, graph)
    eps = exp.get("eps", [])
    if isinstance(eps, (int, float)):
        eps = [eps]
    stem = os.path.splitext(os.path.basename(path))[0]
    out = out_override or exp.get("out") or os.path.join("results", stem)
    options = {k: v for k, v in exp.items() if k not in _CORE_KEYS}
    return ExperimentSpec(
        kind=str(exp.get("kind", "")),
        graph=graph,
        eps=tuple(float(e) for e in eps),
        delta=None if exp.get("delta") is None else float(exp["delta"]),
        delta_prime=(None if exp.get("delta_prime") is None
                     else float(exp["delta_prime"])),
        vertex=int(exp.get("vertex", 0)),
        n_paths=int(exp.get("n_paths", 0)),
        seed=int(exp.get("seed", 0)),
        out=out,
        options=options,
    )


_NEEDS_DELTA = {"exit-stats", "exit-place", "exponential-law", "qsd",
                "dobrushin", "apriori-sweep"}
_NEEDS_DOMAIN = _NEEDS_DELTA | {"compare-marginals"}
_GRAPH_ONLY = {"graph-sim", "resolvent"}


def validate(spec: ExperimentSpec):
    """Config diagnostics as "field: message" strings; empty iff runnable."""
    diags = []
    if spec.kind not in KINDS:
        diags.append(f"experiment.kind: unknown kind {spec.kind!r}")
    graph = None
    if not spec.graph:
        diags.append("experiment.graph: graph file path is required")
    else:
        try:
            graph = load_graph(spec.graph)
        except Exception as e:
            diags.append(f"experiment.graph: cannot load ({e})")
    if graph is not None and spec.vertex not in graph.vertices:
        diags.append(f"experiment.vertex: vertex {spec.vertex} is not in "
                     f"the graph")
    if spec.kind in _NEEDS_DOMAIN:
        if not spec.eps:
            diags.append("experiment.eps: sweep list must be non-empty")
        elif any(e <= 0 for e in spec.eps):
            diags.append("experiment.eps: all entries must be positive")
    occupation = spec.kind == "exit-stats" and "occupation" in spec.options
    if spec.kind in _NEEDS_DELTA and not occupation:
        if spec.delta is None or spec.delta <= 0:
            diags.append("experiment.delta: a positive delta is required")
    if spec.kind in ("qsd", "dobrushin"):
        dp = spec.delta_prime
        if dp is None or dp <= 0:
            diags.append("experiment.delta_prime: a positive delta' is "
                         "required")
        elif spec.delta is not None and 2.0 * dp >= spec.delta:
            diags.append("experiment.delta_prime: need 2 delta' < delta")
    if spec.n_paths < 2 and not occupation:
        diags.append("experiment.n_paths: need at least 2 paths")
    if spec.seed < 0:
        diags.append("experiment.seed: seed must be nonnegative")
    if spec.kind in _GRAPH_ONLY or spec.kind == "compare-marginals":
        ds = spec.options.get("delta_sim", 0.1)
        if ds <= 0:
            diags.append("experiment.delta_sim: must be positive")
    lams = spec.options.get("lams", [])
    if spec.kind == "resolvent" and any(l <= 0 for l in lams):
        diags.append("experiment.lams: rates must be positive")
    return diags


# --- shared plumbing ---


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    return x


def _sim_config(spec, eps):
    h_factor = float(spec.options.get("h_factor", 1.0 / 128.0))
    return SimConfig(h=h_factor * eps * eps, seed=spec.seed)


def _build_domain(spec, graph, eps):
    profile = spec.options.get("profile", "quintic")
    return TubeDomain(graph, eps, profile_kind=profile)


def _exit_chunk(dom, starts, target, cfg, lo, strict):
    ids = np.arange(lo, lo + len(starts), dtype=np.int64)
    return batch_exits(dom, starts, target, cfg, path_ids=ids,
                       strict_shell=strict)


def _run_chunk(dom, starts, T, cfg, lo):
    ids = np.arange(lo, lo + len(starts), dtype=np.int64)
    return run_to_time(dom, starts, T, cfg, path_ids=ids)


def _chunked(fn, dom, starts, workers, *args):
    """Apply fn per fixed-size chunk; chunk boundaries never depend on
    the worker count, so aggregation order is deterministic."""
    n = len(starts)
    spans = [(lo, min(lo + _CHUNK, n)) for lo in range(0, n, _CHUNK)]
    if workers <= 1 or len(spans) == 1:
        parts = [fn(dom, starts[lo:hi], *args, lo) for lo, hi in spans]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(fn, dom, starts[lo:hi], *args, lo)
                    for lo, hi in spans]
            parts = [f.result() for f in futs]
    if isinstance(parts[0], list):
        return [r for part in parts for r in part]
    return np.concatenate(parts, axis=0)


def _exits(dom, starts, target, cfg, workers, strict=True):
    return _chunked(_exit_chunk, dom, starts, workers, target, cfg, strict)


def _finals(dom, starts, T, cfg, workers):
    return _chunked(_run_chunk, dom, starts, workers, T, cfg)


def _center_starts(dom, j, n):
    return np.tile(dom.graph.vertices[j].position, (n, 1))


def _make_starts(spec, dom, eps, rng, n_paths=None):
    """Start positions per the config: the vertex ball center, or a
    uniform sample of the shell at start_delta (default the collar)."""
    j = spec.vertex
    n = spec.n_paths if n_paths is None else int(n_paths)
    mode = spec.options.get("start", "center")
    if mode == "center":
        return _center_starts(dom, j, n), False
    if mode == "shell":
        sd = float(spec.options.get(
            "start_delta", dom.ball_radius[j] + 3.0 * eps))
        pts, _ = dom.sample_shell(j, sd, rng, n)
        return pts, True
    raise ValueError(f"unknown start mode {mode!r}")


def _assert_row(name, passed, detail):
    return {"name": name, "passed": bool(passed), "detail": detail}


def _records_csv(records):
    header = ["path_id", "sigma", "code", "edge", "steps"]
    rows = [[r.path_id, repr(float(r.sigma)), r.code,
             "" if r.edge is None else r.edge, r.steps] for r in records]
    return header, rows


class _PartialError(RuntimeError):
    """Carries results finished before a sweep step failed."""

    def __init__(self, partial, cause):
        super().__init__(str(cause))
        self.partial = partial
        self.cause = cause


# --- per-kind runners: each returns (results, assertions, csvs) where
# csvs is a list of (filename, header, rows) ---


def _run_exit_place(spec, graph, workers, emit_paths):
    tol = float(spec.options.get("tol_freq", 0.02))
    results, assertions, csvs = {}, [], []
    for eps in spec.eps:
        try:
            dom = _build_domain(spec, graph, eps)
            rng = np.random.default_rng(spec.seed)
            starts, strict = _make_starts(
                dataclasses.replace(
                    spec, options={**spec.options,
                                   "start": spec.options.get("start",
                                                             "shell")}),
                dom, eps, rng)
            cfg = _sim_config(spec, eps)
            target = ShellTarget(spec.vertex, hi=spec.delta)
            records = _exits(dom, starts, target, cfg, workers,
                             strict=strict)
            places = exitstats.summarize_exit_places(
                records, edges=graph.incident_edges(spec.vertex))
            pred = exitstats.predict(dom, spec.vertex, spec.delta)
        except Exception as e:
            raise _PartialError(results, e)
        key = f"eps={eps:g}"
        results[key] = {
            "frequencies": {k: v[0] for k, v in places.items()},
            "wilson_ci": {k: list(v[1]) for k, v in places.items()},
            "predicted": pred.skew,
            "n": len(records),
        }
        rows = [[k, repr(v[0]), repr(v[1][0]), repr(v[1][1]),
                 repr(pred.skew[k])] for k, v in places.items()]
        csvs.append((f"exit_places_eps{eps:g}.csv",
                     ["edge", "freq", "ci_lo", "ci_hi", "predicted"], rows))
        for k, (f, _ci) in places.items():
            assertions.append(_assert_row(
                f"{key}: edge {k} frequency within {tol} of prediction",
                abs(f - pred.skew[k]) <= tol,
                f"freq {f:.4f} vs {pred.skew[k]:.4f}"))
        if emit_paths:
            csvs.append((f"records_eps{eps:g}.csv", *_records_csv(records)))
    return results, assertions, csvs


def _run_exit_stats(spec, graph, workers, emit_paths):
    results, assertions, csvs = {}, [], []
    opt = spec.options
    mgf_lam = opt.get("mgf_lam")
    sweep_paths = opt.get("sweep_paths")
    if sweep_paths is not None and len(sweep_paths) != len(spec.eps):
        raise ValueError("sweep_paths must have one entry per eps")
    sweep_rows = []
    for i, eps in enumerate(spec.eps):
        try:
            dom = _build_domain(spec, graph, eps)
            rng = np.random.default_rng(spec.seed)
            res = {}
            if "occupation" in opt:
                occ = opt["occupation"]
                cfg = _sim_config(spec, eps)
                out = run_occupation(
                    dom, dom.graph.vertices[spec.vertex].position, cfg,
                    int(occ["n_steps"]), spec.vertex,
                    (int(occ["slab_edge"]), float(occ["slab_lo"]),
                     float(occ["slab_hi"])))
                target_ratio = (
                    dom.region_volume(("ball", spec.vertex))
                    / dom.region_volume(("slab", int(occ["slab_edge"]),
                                         float(occ["slab_lo"]),
                                         float(occ["slab_hi"]))))
                ratio = out["time_in_ball"] / out["time_in_slab"]
                rel = ratio / target_ratio - 1.0
                res["occupation"] = {
                    "ratio": ratio, "target": target_ratio, "rel_err": rel,
                    **out}
                tol = float(occ.get("tol", 0.05))
                assertions.append(_assert_row(
                    f"eps={eps:g}: occupation ratio within {tol:.0%} of "
                    "region volumes",
                    abs(rel) <= tol,
                    f"ratio {ratio:.4f} target {target_ratio:.4f} "
                    f"rel {rel:+.4f}"))
            else:
                n_i = None if sweep_paths is None else sweep_paths[i]
                starts, strict = _make_starts(spec, dom, eps, rng,
                                              n_paths=n_i)
                cfg = _sim_config(spec, eps)
                target = ShellTarget(spec.vertex, hi=spec.delta)
                records = _exits(dom, starts, target, cfg, workers,
                                 strict=strict)
                summ = exitstats.summarize_exit_times(records)
                pred = exitstats.predict(dom, spec.vertex, spec.delta)
                ratio, rci = exitstats.ratio_to_prediction(records, pred)
                res.update({
                    "mean": summ.mean, "variance": summ.variance,
                    "ci95": summ.ci95, "n": summ.n,
                    "n_excluded": summ.n_excluded,
                    "predicted_mean": pred.mean_exit,
                    "ratio": ratio, "ratio_ci95": rci,
                })
                if mgf_lam is not None:
                    m, mci = exitstats.mgf_estimate(records, float(mgf_lam))
                    res["mgf"] = m
                    res["mgf_ci95"] = mci
                    sweep_rows.append((eps, m, mci))
                if "second_moment_groups" in opt:
                    ng = int(opt["second_moment_groups"])
                    per = spec.n_paths // ng
                    sd = float(opt.get(
                        "start_delta", dom.ball_radius[spec.vertex] + 3 * eps))
                    pts, _ = dom.sample_shell(spec.vertex, sd, rng, ng)
                    groups = {}
                    for gi in range(ng):
                        st = np.tile(pts[gi], (per, 1))
                        ids = np.arange(gi * per, (gi + 1) * per)
                        groups[gi] = batch_exits(dom, st, target, cfg,
                                                 path_ids=ids)
                    ok, margin = exitstats.second_moment_check(groups)
                    res["second_moment_margin"] = margin
                    assertions.append(_assert_row(
                        f"eps={eps:g}: E[sigma^2] <= 2 (max mean)^2 "
                        "(3 SE slack) for all starts",
                        ok, f"worst margin {margin:.4f}"))
                if emit_paths:
                    csvs.append((f"records_eps{eps:g}.csv",
                                 *_records_csv(records)))
        except _PartialError:
            raise
        except Exception as e:
            raise _PartialError(results, e)
        results[f"eps={eps:g}"] = res
    if mgf_lam is not None and sweep_rows:
        csvs.append(("mgf_sweep.csv", ["eps", "mgf", "ci95"],
                     [[repr(float(e)), repr(float(m)), repr(float(c))]
                      for e, m, c in sweep_rows]))
        if opt.get("mgf_decreasing") and len(sweep_rows) > 1:
            vals = [m for _, m, _ in sweep_rows]
            assertions.append(_assert_row(
                "mgf strictly decreasing across the sweep",
                all(b < a for a, b in zip(vals, vals[1:])),
                " -> ".join(f"{v:.4f}" for v in vals)))
        if "mgf_max" in opt:
            last = sweep_rows[-1][1]
            assertions.append(_assert_row(
                f"mgf at smallest eps < {opt['mgf_max']}",
                last < float(opt["mgf_max"]), f"{last:.4f}"))
    return results, assertions, csvs


def _run_exponential_law(spec, graph, workers, emit_paths):
    results, assertions, csvs = {}, [], []
    for eps in spec.eps:
        try:
            dom = _build_domain(spec, graph, eps)
            rng = np.random.default_rng(spec.seed)
            starts, strict = _make_starts(spec, dom, eps, rng)
            cfg = _sim_config(spec, eps)
            target = ShellTarget(spec.vertex, hi=spec.delta)
            records = _exits(dom, starts, target, cfg, workers,
                             strict=strict)
            pred = exitstats.predict(dom, spec.vertex, spec.delta)
            summ = exitstats.summarize_exit_times(records)
            ks = exitstats.ks_exponential(records, pred.rate_scale)
        except Exception as e:
            raise _PartialError(results, e)
        results[f"eps={eps:g}"] = {
            "ks": ks, "rate_scale": pred.rate_scale, "mean": summ.mean,
            "n": summ.n,
        }
        if "ks_max" in spec.options:
            assertions.append(_assert_row(
                f"eps={eps:g}: KS against Exp(1) < {spec.options['ks_max']}",
                ks < float(spec.options["ks_max"]), f"ks {ks:.4f}"))
        if "ks_min" in spec.options:
            assertions.append(_assert_row(
                f"eps={eps:g}: KS against Exp(1) > {spec.options['ks_min']} "
                "(negative control)",
                ks > float(spec.options["ks_min"]), f"ks {ks:.4f}"))
        if emit_paths:
            csvs.append((f"records_eps{eps:g}.csv", *_records_csv(records)))
    return results, assertions, csvs


def _run_apriori_sweep(spec, graph, workers, emit_paths):
    results, assertions, csvs = {}, [], []
    rows = []
    eps_list = sorted(spec.eps, reverse=True)
    for eps in eps_list:
        try:
            dom = _build_domain(spec, graph, eps)
            rng = np.random.default_rng(spec.seed)
            starts, strict = _make_starts(spec, dom, eps, rng)
            cfg = _sim_config(spec, eps)
            target = ShellTarget(spec.vertex, hi=spec.delta)
            records = _exits(dom, starts, target, cfg, workers,
                             strict=strict)
            pred = exitstats.predict(dom, spec.vertex, spec.delta)
            ratio, rci = exitstats.ratio_to_prediction(records, pred)
        except Exception as e:
            raise _PartialError(results, e)
        results[f"eps={eps:g}"] = {
            "ratio": ratio, "ratio_ci95": rci,
            "predicted_mean": pred.mean_exit, "alpha_eps": pred.alpha_eps,
        }
        rows.append((eps, ratio, rci))
        if emit_paths:
            csvs.append((f"records_eps{eps:g}.csv", *_records_csv(records)))
    csvs.append(("ratio_sweep.csv", ["eps", "ratio", "ratio_ci95"],
                 [[repr(float(e)), repr(float(r)), repr(float(c))]
                  for e, r, c in rows]))
    lo = float(spec.options.get("ratio_lo", 0.85))
    hi = float(spec.options.get("ratio_hi", 1.15))
    final = rows[-1][1]
    assertions.append(_assert_row(
        f"ratio at smallest eps within [{lo}, {hi}]",
        lo <= final <= hi, f"ratio {final:.4f}"))
    if len(rows) > 1:
        errs = [abs(r - 1.0) for _, r, _ in rows]
        assertions.append(_assert_row(
            "|ratio - 1| non-increasing across the sweep",
            all(b <= a + 1e-12 for a, b in zip(errs, errs[1:])),
            " -> ".join(f"{v:.4f}" for v in errs)))
    return results, assertions, csvs


def _qsd_config(spec, dom):
    cfg = _sim_config(spec, dom.epsilon)
    return qsd.ChainConfig(vertex=spec.vertex, delta_p=spec.delta_prime,
                           delta=spec.delta, sim=cfg)


def _run_qsd(spec, graph, workers, emit_paths):
    eps = spec.eps[0]
    dom = _build_domain(spec, graph, eps)
    cc = _qsd_config(spec, dom)
    cc.validate_for(dom)
    inc = graph.incident_edges(spec.vertex)
    e_a, e_b = spec.options.get("start_edges", inc[:2])
    n_list = [int(n) for n in spec.options.get("n_list", (1, 2, 4, 8))]
    rng = np.random.default_rng(spec.seed)
    za, _ = dom.sample_shell(spec.vertex, spec.delta_prime, rng, 1,
                             edge=int(e_a))
    zb, _ = dom.sample_shell(spec.vertex, spec.delta_prime, rng, 1,
                             edge=int(e_b))
    snaps_a = qsd.conditioned_snapshots(dom, za[0], n_list, spec.n_paths,
                                        cc, stream0=0)
    snaps_b = qsd.conditioned_snapshots(dom, zb[0], n_list, spec.n_paths,
                                        cc, stream0=10**7)
    tvs = {n: qsd.tv_distance(snaps_a[n], snaps_b[n]) for n in n_list}
    n_max = max(n_list)
    sa = snaps_a[n_max].survivors / spec.n_paths
    sb = snaps_b[n_max].survivors / spec.n_paths
    ratio = sa / sb
    sd_log = math.sqrt((1 - sa) / (spec.n_paths * sa)
                       + (1 - sb) / (spec.n_paths * sb))
    surv, trials = 0, 0
    for snaps in (snaps_a, snaps_b):
        h = snaps[n_max].history
        surv += sum(h[1:])
        trials += sum(h[:-1])
    p_hat = surv / trials
    ci = _Z95 * math.sqrt(p_hat * (1 - p_hat) / trials)
    m = cc.collar(dom)
    p_oracle = oracle1d.survival_prob_one_cycle(spec.delta_prime,
                                                spec.delta, m)
    results = {
        "tv": {str(n): tvs[n] for n in n_list},
        "survival_a": sa, "survival_b": sb,
        "survival_ratio": ratio, "ratio_log_sd": sd_log,
        "per_cycle_survival": p_hat, "per_cycle_ci95": ci,
        "per_cycle_oracle": p_oracle,
    }
    assertions = []
    tv_max = float(spec.options.get("tv_max", 0.1))
    assertions.append(_assert_row(
        f"TV at n={n_max} below {tv_max}",
        tvs[n_max] < tv_max, f"tv {tvs[n_max]:.4f}"))
    seq = [tvs[n] for n in n_list]
    assertions.append(_assert_row(
        "TV decreasing over the cycle counts",
        all(b < a for a, b in zip(seq, seq[1:])),
        " -> ".join(f"{v:.4f}" for v in seq)))
    assertions.append(_assert_row(
        "survival ratio consistent with 1 (95% CI on log ratio)",
        abs(math.log(ratio)) <= _Z95 * sd_log,
        f"ratio {ratio:.4f} log-sd {sd_log:.4f}"))
    assertions.append(_assert_row(
        "per-cycle survival matches the 1-D oracle (95% CI)",
        abs(p_hat - p_oracle) <= ci,
        f"observed {p_hat:.4f} oracle {p_oracle:.4f} ci {ci:.4f}"))
    csvs = [("qsd_tv.csv",
             ["n", "tv", "survivors_a", "survivors_b"],
             [[n, repr(float(tvs[n])), snaps_a[n].survivors,
               snaps_b[n].survivors] for n in n_list])]
    return results, assertions, csvs


def _run_dobrushin(spec, graph, workers, emit_paths):
    eps = spec.eps[0]
    dom = _build_domain(spec, graph, eps)
    cc = _qsd_config(spec, dom)
    c1, c2, eta = qsd.dobrushin_check(
        dom, cc, n0=int(spec.options.get("n0", 2)), n_paths=spec.n_paths)
    results = {"c1": c1, "c2": c2, "eta": eta}
    assertions = []
    if "c1_min" in spec.options:
        assertions.append(_assert_row(
            f"uniform lower bound c1 >= {spec.options['c1_min']}",
            c1 >= float(spec.options["c1_min"]),
            f"c1 {c1:.4f} (sampling slack {eta:.4f})"))
    return results, assertions, []


def _graph_scheme(spec, graph):
    ds = float(spec.options.get("delta_sim", 0.1))
    h_edge = spec.options.get("h_edge")
    return graphdiff.ShellScheme.for_graph(
        graph, ds, None if h_edge is None else float(h_edge))


def _graph_start(spec, graph):
    if "start_edge" in spec.options:
        return GraphPoint.on_edge(int(spec.options["start_edge"]),
                                  float(spec.options["start_s"]))
    return GraphPoint.at_vertex(spec.vertex)


def _run_graph_sim(spec, graph, workers, emit_paths):
    scheme = _graph_scheme(spec, graph)
    z0 = _graph_start(spec, graph)
    T = float(spec.options.get("t_horizon", 1.0))
    rng = np.random.default_rng(spec.seed)
    paths = [graphdiff.simulate(graph, z0, T, scheme, rng)
             for _ in range(spec.n_paths)]
    terminals = {}
    for p in paths:
        terminals[p.terminal] = terminals.get(p.terminal, 0) + 1
    results = {"terminals": terminals, "delta_sim": scheme.delta_sim,
               "h_edge": scheme.h_edge}
    assertions, csvs = [], []
    gp = graph.gluing_params(spec.vertex)
    if (z0.is_vertex and not gp.absorbing
            and not graphdiff._is_cap(graph, scheme, spec.vertex)):
        inc = graph.incident_edges(spec.vertex)
        counts = {k: 0 for k in inc}
        for p in paths:
            first = p.points[1]
            if not first.is_vertex:
                counts[first.edge] += 1
        n = sum(counts.values())
        freqs = {k: counts[k] / n for k in inc}
        results["first_exit_freq"] = freqs
        results["skew"] = {k: p for k, p in zip(inc, gp.skew)}
        # Bonferroni z: the edges are checked jointly, so each Wilson CI
        # gets level 1 - 0.05/len(inc)
        zb = float(spec.options.get("wilson_z", _bonferroni_z(len(inc))))
        for k, pk in zip(inc, gp.skew):
            lo, hi = exitstats._wilson(counts[k], n, z=zb)
            assertions.append(_assert_row(
                f"first exit edge {k}: skew inside the Wilson CI",
                lo <= pk <= hi,
                f"freq {freqs[k]:.4f} ci [{lo:.4f}, {hi:.4f}] skew "
                f"{pk:.4f}"))
        occ = graphdiff.vertex_mean_occupation(graph, paths, spec.vertex,
                                               scheme.delta_sim)
        want = scheme.delta_sim / 2.0 + gp.alpha
        tol = float(spec.options.get("occ_tol", 0.05))
        results["occupation"] = {"measured": occ, "expected": want}
        assertions.append(_assert_row(
            f"vertex occupation within {tol:.0%} of delta_sim/2 + alpha",
            abs(occ - want) / want <= tol,
            f"occ {occ:.4f} want {want:.4f}"))
    if emit_paths:
        rows = []
        for i, p in enumerate(paths):
            for t, q in zip(p.times, p.points):
                rows.append([i, repr(float(t)),
                             q.vertex if q.is_vertex else "",
                             "" if q.is_vertex else q.edge,
                             "" if q.is_vertex else repr(float(q.s))])
        csvs.append(("trajectories.csv",
                     ["path_id", "t", "vertex", "edge", "s"], rows))
    return results, assertions, csvs


def _run_resolvent(spec, graph, workers, emit_paths):
    scheme = _graph_scheme(spec, graph)
    fam = graphdiff.cubic_family(graph,
                                 int(spec.options.get("n_funcs", 3)))
    lams = [float(l) for l in spec.options.get("lams", (0.5, 1.0, 2.0))]
    z0 = _graph_start(spec, graph)
    T = float(spec.options.get("t_horizon", 14.0))
    grid = graphdiff.resolvent_grid(graph, fam, lams, z0, spec.n_paths, T,
                                    scheme, seed=spec.seed)
    results, assertions = {}, []
    rows = []
    for fi, row in enumerate(grid):
        for lam, r in zip(lams, row):
            se = r.ci95 / _Z95
            results[f"f{fi}_lam{lam:g}"] = {
                "residual": r.residual, "se": se,
                "tail_bound": r.tail_bound}
            rows.append([fi, repr(lam), repr(r.residual), repr(se),
                         repr(r.tail_bound)])
            assertions.append(_assert_row(
                f"f{fi}, lam={lam:g}: residual within 3 SE of 0",
                abs(r.residual) <= 3.0 * se + r.tail_bound,
                f"resid {r.residual:+.5f} se {se:.5f} "
                f"tail {r.tail_bound:.2e}"))
    csvs = [("resolvent.csv",
             ["func", "lam", "residual", "se", "tail_bound"], rows)]
    return results, assertions, csvs


def _run_compare_marginals(spec, graph, workers, emit_paths):
    scheme = _graph_scheme(spec, graph)
    t_marg = float(spec.options.get("t_marginal", 0.5))
    bin_width = float(spec.options.get("bin_width",
                                       scheme.delta_sim / 4.0))
    j = spec.vertex
    graph_pts = graphdiff.sample_marginal(
        graph, scheme, GraphPoint.at_vertex(j), t_marg, spec.n_paths,
        seed=spec.seed + 101)
    results, assertions, csvs = {}, [], []
    rows = []
    eps_list = sorted(spec.eps, reverse=True)
    for eps in eps_list:
        try:
            dom = _build_domain(spec, graph, eps)
            cfg = _sim_config(spec, eps)
            starts = _center_starts(dom, j, spec.n_paths)
            finals = _finals(dom, starts, t_marg, cfg, workers)
            tube_pts = [dom.project_eps(z) for z in finals]
            w1 = graphdiff.compare_marginals(graph, tube_pts, graph_pts,
                                             bin_width)
        except Exception as e:
            raise _PartialError(results, e)
        results[f"eps={eps:g}"] = {"w1": w1}
        rows.append((eps, w1))
    csvs.append(("w1_sweep.csv", ["eps", "w1"],
                 [[repr(float(e)), repr(float(w))] for e, w in rows]))
    w_max = float(spec.options.get("w1_max", 0.05))
    assertions.append(_assert_row(
        f"W1 at smallest eps below {w_max}",
        rows[-1][1] < w_max, f"w1 {rows[-1][1]:.4f}"))
    if len(rows) > 1:
        vals = [w for _, w in rows]
        assertions.append(_assert_row(
            "W1 decreasing across the sweep",
            all(b < a for a, b in zip(vals, vals[1:])),
            " -> ".join(f"{v:.4f}" for v in vals)))
    return results, assertions, csvs


_RUNNERS = {
    "exit-place": _run_exit_place,
    "exit-stats": _run_exit_stats,
    "exponential-law": _run_exponential_law,
    "apriori-sweep": _run_apriori_sweep,
    "qsd": _run_qsd,
    "dobrushin": _run_dobrushin,
    "graph-sim": _run_graph_sim,
    "resolvent": _run_resolvent,
    "compare-marginals": _run_compare_marginals,
}


def _write_results(outdir, payload):
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "results.json")
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_csvs(outdir, csvs):
    for name, header, rows in csvs:
        with open(os.path.join(outdir, name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)


def run(spec: ExperimentSpec, workers=1, emit_paths=False):
    """Execute the experiment; returns the process exit code."""
    base = {"schema_version": SCHEMA_VERSION, "kind": spec.kind,
            "config": dataclasses.asdict(spec)}
    diags = validate(spec)
    if diags:
        for d in diags:
            _log.error("invalid config: %s", d)
        _write_results(spec.out, {**base, "diagnostics": diags,
                                  "passed": False})
        return 2
    graph = load_graph(spec.graph)
    try:
        results, assertions, csvs = _RUNNERS[spec.kind](
            spec, graph, workers, emit_paths)
    except _PartialError as e:
        _log.exception("run failed: %s", e.cause)
        _write_results(spec.out, {**base, "results": e.partial,
                                  "error": repr(e.cause), "passed": False})
        return 1
    except (GeometryError, ValueError, RuntimeError) as e:
        _log.exception("run failed: %s", e)
        _write_results(spec.out, {**base, "error": repr(e),
                                  "passed": False})
        return 1
    passed = all(a["passed"] for a in assertions)
    path = _write_results(spec.out, {
        **base, "results": results, "assertions": assertions,
        "passed": passed})
    _write_csvs(spec.out, csvs)
    for a in assertions:
        _log.info("%s: %s (%s)", "PASS" if a["passed"] else "FAIL",
                  a["name"], a["detail"])
    _log.info("results written to %s", path)
    return 0 if passed else 1


def main(argv=None):
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "quiet": logging.ERROR}.get(
                 os.environ.get("NARROWTUBE_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    ap = argparse.ArgumentParser(
        prog="narrowtube",
        description="tube-domain and graph-diffusion experiment runner")
    sub = ap.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="run an experiment config")
    rp.add_argument("--config", required=True)
    rp.add_argument("--out", help="output directory")
    rp.add_argument("--workers", type=int, default=1)
    rp.add_argument("--seed-override", type=int, default=None)
    rp.add_argument("--emit-paths", action="store_true",
                    help="also dump per-path records")
    vp = sub.add_parser("validate", help="check a config without running")
    vp.add_argument("--config", required=True)
    ns = ap.parse_args(argv)
    try:
        spec = load_spec(ns.config,
                         out_override=getattr(ns, "out", None))
    except (OSError, tomllib.TOMLDecodeError) as e:
        print(f"config: cannot read ({e})", file=sys.stderr)
        return 2
    if ns.command == "validate":
        diags = validate(spec)
        for d in diags:
            print(d)
        return 0 if not diags else 2
    if ns.seed_override is not None:
        spec = dataclasses.replace(spec, seed=ns.seed_override)
    return run(spec, workers=ns.workers, emit_paths=ns.emit_paths)


if __name__ == "__main__":
    sys.exit(main())
