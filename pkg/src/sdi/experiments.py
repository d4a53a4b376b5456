"""Experiment drivers behind the CLI subcommands.

Each driver takes a :class:`RunConfig` and an output directory, writes its
files there and returns an exit code (0 ok, 2 some run did not converge).
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import io
from .approximators import Schedule, cavity, ep_build_hybrid, method_label, parse_method, run
from .config import RunConfig
from .divergence import d_alpha_gradients, kl_density_to_gaussian, kl_reverse, target_log_z
from .gaussian import moment_to_nat, multiply, nat_distance, nat_to_moment
from .targets import FactorizedTarget, temper

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_VERIFY_FAILED = 0, 1, 2, 3
FIXED_POINT_TOL = 1e-12


def _prepare(cfg: RunConfig, out: Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    return out


def _flags(cfg: RunConfig) -> tuple[bool, bool]:
    o = cfg.section("output")
    return bool(o.get("kl", True)), bool(o.get("timing", False))


def _fixed_point_schedule(cfg: RunConfig, section: str) -> Schedule:
    """The configured schedule, with the tighter tolerance used for fixed-point comparisons."""
    base = cfg.schedule()
    tol = float(cfg.section(section).get("tol", min(base.tol, FIXED_POINT_TOL)))
    return Schedule(base.kind, base.max_sweeps, base.damping, tol, base.subsets, base.workers)


def _run_method(entry: str, alpha, target, cfg: RunConfig, schedule: Schedule, kl=True, timing=False):
    name, parsed = parse_method(entry)
    alpha = parsed if parsed is not None else alpha
    init = cfg.init(target.d)
    return run(name, target, init, schedule, cfg.engine(), alpha, kl=kl, timing=timing)


def _summary(trace, target, engine) -> dict:
    q = trace.final
    kl = kl_reverse(q, target, engine, log_z=target_log_z(target, engine) if target.d <= 4 else None)
    out = {
        "method": trace.method,
        "target": getattr(target, "name", ""),
        "d": target.d,
        "converged": trace.converged,
        "sweeps": trace.sweeps,
        "updates": len(trace.records),
        "final": io.gaussian_json(q),
        "kl_reverse": kl.value,
        "kl_reverse_normalized": kl.normalized,
        "max_err_est": max((r.err_est for r in trace.records), default=0.0),
        "engine": engine.to_dict(),
    }
    if trace.sites is not None:
        out["sites"] = [io.nat_json(s) for s in trace.sites]
    return out


def cmd_run(cfg: RunConfig, out: Path) -> int:
    out = _prepare(cfg, out)
    target = cfg.target()
    name, alpha = cfg.method()
    kl, timing = _flags(cfg)
    q, trace = run(name, target, cfg.init(target.d), cfg.schedule(), cfg.engine(), alpha, kl=kl, timing=timing)
    io.write_trace(out / "trace.csv", trace)
    io.write_json(out / "summary.json", _summary(trace, target, cfg.engine()))
    if not trace.converged:
        log.warning("%s did not converge in %d sweeps", trace.method, trace.sweeps)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_compare(cfg: RunConfig, out: Path) -> int:
    out = _prepare(cfg, out)
    target = cfg.target()
    engine = cfg.engine()
    methods = cfg.section("compare").get("methods", ["laplace", "gvb", "ep_classical"])
    alpha = cfg.section("method").get("alpha")
    results = []
    for entry in methods:
        name, a = parse_method(str(entry))
        a = a if a is not None else alpha
        if name.startswith("ep") and not isinstance(target, FactorizedTarget):
            raise ValueError(f"method {entry} needs a factorized target")
        q, trace = _run_method(entry, a, target, cfg, cfg.schedule(), kl=False)
        results.append((method_label(name, a), q, trace))
    log_z = target_log_z(target, engine) if target.d <= 4 else None
    labels = [lab for lab, _, _ in results]
    header = (["method", "converged", "sweeps"] + io.moment_columns("", target.d)
              + ["kl_reverse"] + [f"dist_{lab}" for lab in labels])
    nats = [moment_to_nat(q) for _, q, _ in results]
    rows = []
    for (lab, q, trace), nat in zip(results, nats):
        kl = kl_reverse(q, target, engine, log_z=log_z).value
        rows.append([lab, int(trace.converged), trace.sweeps] + io.moment_values(q, target.d) + [io.fmt(kl)]
                    + [io.fmt(nat_distance(nat, other)) for other in nats])
    io.write_csv(out / "comparison.csv", header, rows)
    return EXIT_OK if all(t.converged for _, _, t in results) else EXIT_NOT_CONVERGED


def cmd_sweep_alpha(cfg: RunConfig, out: Path) -> int:
    out = _prepare(cfg, out)
    target = cfg.target()
    engine = cfg.engine()
    alphas = [float(a) for a in cfg.section("sweep").get("alphas", [0.5, 0.9, 0.99, 0.999])]
    bad = [a for a in alphas if not 0.0 < a < 1.0]
    if bad:
        raise ValueError(f"sweep alphas must lie in (0, 1): {bad}")
    schedule = _fixed_point_schedule(cfg, "sweep")
    q_gvb, tr_gvb = _run_method("gvb", None, target, cfg, schedule, kl=False)
    gvb_nat = moment_to_nat(q_gvb)
    header = (["alpha", "converged", "sweeps"] + io.moment_columns("", target.d)
              + ["dist_to_gvb", "d_alpha", "grad_mu_norm", "grad_S_norm", "err_est"])
    rows = []
    ok = tr_gvb.converged
    for a in alphas:
        q, trace = _run_method("alpha", a, target, cfg, schedule, kl=False)
        rep = d_alpha_gradients(target, q, a, engine)
        ok = ok and trace.converged
        rows.append([io.fmt(a), int(trace.converged), trace.sweeps] + io.moment_values(q, target.d)
                    + [io.fmt(nat_distance(moment_to_nat(q), gvb_nat)), io.fmt(rep.value),
                       io.fmt(np.linalg.norm(rep.grad_mu)), io.fmt(np.linalg.norm(rep.grad_S)), io.fmt(rep.err_est)])
    io.write_csv(out / "sweep_alpha.csv", header, rows)
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def max_hybrid_kl(target: FactorizedTarget, sites, engine) -> float:
    """``max_i KL(h_i, q)`` between each EP hybrid and the global approximation."""
    q = nat_to_moment(multiply(cavity(0, sites), sites[0]))
    seen = {}
    worst = 0.0
    for i in range(target.n):
        key = (target.sites[i], sites[i].r.tobytes(), sites[i].B.tobytes())
        if key not in seen:
            seen[key] = kl_density_to_gaussian(ep_build_hybrid(i, sites, target, engine), q, engine)
        worst = max(worst, seen[key])
    return worst


def cmd_folk_theorem(cfg: RunConfig, out: Path) -> int:
    out = _prepare(cfg, out)
    target = cfg.target()
    if not isinstance(target, FactorizedTarget):
        raise ValueError("folk-theorem needs a factorized target")
    engine = cfg.engine()
    ks = [int(k) for k in cfg.section("folk").get("k_list", [1, 4, 16, 64])]
    if any(k < 1 for k in ks):
        raise ValueError("k_list values must be >= 1")
    schedule = _fixed_point_schedule(cfg, "folk")
    name = cfg.method()[0]
    ep_name = name if name.startswith("ep") else "ep_classical"
    q_gvb, tr_gvb = _run_method("gvb", None, target, cfg, schedule, kl=False)
    gvb_nat = moment_to_nat(q_gvb)
    d = target.d
    header = (["k", "n_sites"] + io.moment_columns("ep_", d) + io.moment_columns("gvb_", d)
              + ["dist", "max_hybrid_kl", "converged", "sweeps"])
    rows = []
    ok = tr_gvb.converged
    for k in ks:
        tk = temper(target, k) if k > 1 else target
        q, trace = run(ep_name, tk, None, schedule, engine, kl=False)
        ok = ok and trace.converged
        rows.append([k, tk.n] + io.moment_values(q, d) + io.moment_values(q_gvb, d)
                    + [io.fmt(nat_distance(moment_to_nat(q), gvb_nat)), io.fmt(max_hybrid_kl(tk, trace.sites, engine)),
                       int(trace.converged), trace.sweeps])
    io.write_csv(out / "folk_theorem.csv", header, rows)
    return EXIT_OK if ok else EXIT_NOT_CONVERGED
