"""Reduced invariant battery behind ``sdi verify``.

Each check yields ``{check, value, reference, tolerance, pass}`` with
``pass = |value - reference| <= tolerance``. One-dimensional checks use the
grid engine; the two-dimensional ones use the configured engine, so a
deliberately coarse quadrature order shows up as failures.
"""

from __future__ import annotations

import math

import numpy as np

from .approximators import (METHODS, Schedule, alpha_hybrid, alpha_hybrid_grad, cavity, ep_build_hybrid,
                            ep_update_classical, ep_update_smoothed, run)
from .config import RunConfig
from .divergence import (d_alpha, d_alpha_gradients, kl_forward, kl_gradients, kl_reverse, target_log_z,
                         target_proposal)
from .engine import DEFAULT_ENGINE, Engine, UnnormalizedDensity, gaussian_expect, stein_residuals
from .gaussian import GaussianMoment, GaussianNat
from .targets import (builtin_targets, demo_logistic_data, factorize, make_gaussian_target,
                      make_logistic_regression_target)


def _check(name, value, reference, tolerance) -> dict:
    value, reference, tolerance = float(value), float(reference), float(tolerance)
    ok = math.isfinite(value) and abs(value - reference) <= tolerance
    return {"check": name, "value": value, "reference": reference, "tolerance": tolerance, "pass": bool(ok)}


def finite_difference_gradients(fun, q: GaussianMoment, step: float = 1e-5):
    """Central differences of ``fun(GaussianMoment)`` in μ and in the lower triangle of S."""
    d = q.d
    g_mu = np.zeros(d)
    for a in range(d):
        e = np.zeros(d)
        e[a] = step
        g_mu[a] = (fun(GaussianMoment.from_sqrt(q.mu + e, q.sqrt))
                   - fun(GaussianMoment.from_sqrt(q.mu - e, q.sqrt))) / (2 * step)
    g_S = np.zeros((d, d))
    for a in range(d):
        for b in range(a + 1):
            E = np.zeros((d, d))
            E[a, b] = step
            g_S[a, b] = (fun(GaussianMoment.from_sqrt(q.mu, q.sqrt + E))
                         - fun(GaussianMoment.from_sqrt(q.mu, q.sqrt - E))) / (2 * step)
    return g_mu, g_S


def _rel_err(an_mu, an_S, fd_mu, fd_S) -> float:
    an = np.concatenate([np.ravel(an_mu), np.ravel(an_S)])
    fd = np.concatenate([np.ravel(fd_mu), np.ravel(fd_S)])
    return float(np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12))


def _stein_max(h, grad, engine) -> float:
    first, second = stein_residuals(h, grad, h.proposal.mu, engine)
    return float(max(np.abs(first).max(), np.abs(second).max()))


def _target_stein(target, engine) -> float:
    h = UnnormalizedDensity(target.d, lambda t: -target._f(t), target_proposal(target).scaled(engine.inflation))
    return _stein_max(h, target._g, engine)


def _ep_hybrid_grad(i, sites, target):
    cav = cavity(i, sites)
    return lambda t: target.grad_phi(i, t) + t @ cav.B - cav.r


def newton_recursion(target, mu0, iters: int) -> list:
    """Plain Newton iteration ``μ ← μ - H(μ)⁻¹ ∇ψ(μ)`` on the target energy."""
    mu = np.array(mu0, dtype=float)
    out = []
    for _ in range(iters):
        mu = mu - np.linalg.solve(target.hess_psi(mu), target.grad_psi(mu))
        out.append(mu.copy())
    return out


def random_site_state(target, rng, scale: float = 0.5) -> list:
    """Random positive site approximations (a normalizable cavity for every site)."""
    d = target.d
    sites = []
    for _ in range(target.n):
        A = rng.normal(size=(d, d)) * 0.3
        B = A @ A.T + rng.uniform(0.05, scale) * np.eye(d)
        sites.append(GaussianNat(rng.normal(size=d) * 0.3, B, role="site"))
    return sites


def _stein_section(engine, grid, t1, t2):
    out = []
    for name, t in builtin_targets(1).items():
        out.append(_check(f"stein.target.{name}.d1", _target_stein(t, grid), 0.0, 1e-6))
    out.append(_check("stein.target.logistic.d2", _target_stein(t2, engine), 0.0, 1e-6))
    _, tr = run("ep_classical", t1, engine=grid, kl=False)
    worst = max(_stein_max(ep_build_hybrid(i, tr.sites, t1, grid), _ep_hybrid_grad(i, tr.sites, t1), grid)
                for i in range(t1.n))
    out.append(_check("stein.ep_hybrid.logistic.d1", worst, 0.0, 1e-6))
    for a in (0.25, 0.5, 0.75):
        h = alpha_hybrid(Q1, t1, a, grid)
        out.append(_check(f"stein.alpha_hybrid.{a:g}.d1", _stein_max(h, alpha_hybrid_grad(Q1, t1, a), grid),
                          0.0, 1e-6))
    h = alpha_hybrid(Q2, t2, 0.5, engine)
    out.append(_check("stein.alpha_hybrid.0.5.d2", _stein_max(h, alpha_hybrid_grad(Q2, t2, 0.5), engine), 0.0, 1e-6))
    return out


def _gradient_section(engine, grid, t1, t2):
    out = []
    for label, t, q, eng in (("d1", t1, Q1, grid), ("d2", t2, Q2, engine)):
        rep = kl_gradients(q, t, eng)
        fd = finite_difference_gradients(lambda g: kl_reverse(g, t, eng).value, q)
        out.append(_check(f"gradient.kl_reverse.{label}", _rel_err(rep.grad_mu, rep.grad_S, *fd), 0.0, 1e-4))
    rep = d_alpha_gradients(t1, Q1, 0.5, grid)
    fd = finite_difference_gradients(lambda g: d_alpha(t1, g, 0.5, grid).value, Q1)
    out.append(_check("gradient.d_alpha.0.5.d1", _rel_err(rep.grad_mu, rep.grad_S, *fd), 0.0, 1e-4))
    return out


def _equivalence_section(engine, grid, t1, t2, rng):
    out = []
    for label, t, eng, trials in (("d1", t1, grid, 10), ("d2", t2, engine, 3)):
        worst = None
        for _ in range(trials):
            sites = random_site_state(t, rng)
            i = int(rng.integers(t.n))
            a, ma = ep_update_classical(i, sites, t, eng, return_summary=True)
            b, mb = ep_update_smoothed(i, sites, t, eng, return_summary=True)
            gap = float(np.abs(a.flat() - b.flat()).max())
            tol = 10 * (ma.err_est + mb.err_est)
            if worst is None or gap - tol > worst[0] - worst[1]:
                worst = (gap, tol)
        out.append(_check(f"equivalence.ep_update.{label}", worst[0], 0.0, worst[1]))
    return out


def _fixed_point_section(engine, grid, t1, t2):
    tight = Schedule(tol=1e-12)
    qg, _ = run("gvb", t1, schedule=tight, engine=grid, kl=False)
    vals, _ = gaussian_expect(qg, {"g": t1._g, "H": t1._h}, grid)
    out = [_check("fixed_point.gvb.grad", np.linalg.norm(vals["g"]), 0.0, 1e-6),
           _check("fixed_point.gvb.precision", np.linalg.norm(vals["H"] - qg.precision), 0.0, 1e-6)]
    qa, _ = run("alpha", t1, schedule=tight, engine=grid, alpha=0.5, kl=False)
    rep = d_alpha_gradients(t1, qa, 0.5, grid)
    gnorm = math.hypot(np.linalg.norm(rep.grad_mu), np.linalg.norm(rep.grad_S))
    out.append(_check("fixed_point.alpha.0.5", gnorm, 0.0, 10 * rep.err_est))
    return out


def _divergence_section(engine, grid, t1, t2):
    # closed-form Gaussian oracles
    p = make_gaussian_target([0.0], [[1.0]])
    q_wide = GaussianMoment([0.0], [[2.0]])
    fwd = 0.5 * (math.log(2) + 0.5 - 1)
    rev = 0.5 * (2 - 1 - math.log(2))
    return [
        _check("divergence.hellinger", d_alpha(p, GaussianMoment([1.0], [[1.0]]), 0.5, grid).value,
               4 * (1 - math.exp(-1 / 8)), 1e-5),
        _check("divergence.limit.alpha_0", d_alpha(p, q_wide, 1e-3, grid).value, fwd, 1e-3),
        _check("divergence.limit.alpha_1", d_alpha(p, q_wide, 1 - 1e-3, grid).value, rev, 1e-3),
        _check("divergence.kl_forward", kl_forward(p, q_wide, grid).value, fwd, 1e-8),
        _check("divergence.kl_reverse", kl_reverse(q_wide, p, grid).value, rev, 1e-8),
    ]


def _exactness_section(engine, grid, t1, t2):
    mu = np.array([0.4, -0.3])
    sigma = np.array([[0.8, 0.2], [0.2, 0.5]])
    gt = factorize(make_gaussian_target(mu, sigma), 2)
    out = []
    for m in METHODS:
        q, _ = run(m, gt, engine=engine, alpha=0.5, kl=False)
        err = max(np.abs(q.mu - mu).max(), np.abs(q.sigma - sigma).max())
        out.append(_check(f"exactness.gaussian.{m}.d2", err, 0.0, 1e-8))
    return out


def _newton_section(engine, grid, t1, t2):
    out = []
    for label, t in (("logistic.d1", t1), ("logistic.d2", t2)):
        init = GaussianMoment.standard(t.d)
        _, tr = run("laplace", t, init, Schedule(tol=0.0, max_sweeps=20), kl=False)
        ref = newton_recursion(t, init.mu, 20)
        gap = max(float(np.abs(a - b).max()) for a, b in zip(tr.means, ref))
        out.append(_check(f"newton_identity.{label}", gap, 0.0, 1e-12))
    return out


def _quadrature_section(engine, grid, t1, t2):
    fine = engine.with_(mode="gh_importance", order=64)
    return [_check("quadrature.log_z.logistic.d2", target_log_z(t2, engine), target_log_z(t2, fine), 1e-8)]


Q1 = GaussianMoment(np.array([0.3]), np.array([[0.7]]))
Q2 = GaussianMoment(np.array([0.2, -0.1]), np.array([[0.5, 0.1], [0.1, 0.4]]))


def run_checks(engine: Engine = DEFAULT_ENGINE, seed: int = 0) -> list[dict]:
    """Run every section; an exception inside a section is reported as a failed check."""
    rng = np.random.default_rng(seed)
    if engine.mode == "grid1d":
        engine = engine.with_(mode="auto")
    grid = DEFAULT_ENGINE
    t1 = builtin_targets(1)["logistic"]
    X2, y2 = demo_logistic_data(8, 2, seed=0)
    t2 = make_logistic_regression_target(X2, y2)
    sections = [("stein", _stein_section), ("gradient", _gradient_section),
                ("equivalence", lambda *a: _equivalence_section(*a, rng)), ("fixed_point", _fixed_point_section),
                ("divergence", _divergence_section), ("exactness", _exactness_section),
                ("newton_identity", _newton_section), ("quadrature", _quadrature_section)]
    checks = []
    for name, fn in sections:
        try:
            checks.extend(fn(engine, grid, t1, t2))
        except Exception as exc:
            checks.append({"check": f"{name}.error", "value": float("nan"), "reference": 0.0, "tolerance": 0.0,
                           "pass": False, "error": f"{type(exc).__name__}: {exc}"})
    return checks


def format_table(checks: list[dict]) -> str:
    width = max(len(c["check"]) for c in checks)
    lines = [f"{'check':<{width}}  {'value':>12}  {'reference':>12}  {'tolerance':>10}  result"]
    for c in checks:
        lines.append(f"{c['check']:<{width}}  {c['value']:>12.4g}  {c['reference']:>12.4g}  "
                     f"{c['tolerance']:>10.3g}  {'pass' if c['pass'] else 'FAIL'}")
    return "\n".join(lines)


def verify_config(cfg: RunConfig) -> list[dict]:
    return run_checks(cfg.engine(), cfg.seed)
