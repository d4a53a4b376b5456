"""Iterative Gaussian approximations sharing one update skeleton.

Every method computes a centering mean ``μ``, a smoothed gradient ``E∇`` and a
smoothed curvature ``EH``, then forms the Gaussian

    exp(-⟨E∇|θ-μ⟩ - ½⟨θ-μ|EH|θ-μ⟩),

whose natural parameters are ``B = EH`` and ``r = EH μ - E∇``. The methods
differ only in the kernel the expectations are taken under: a point mass
(Newton/Laplace), the current Gaussian (GVB), the α-hybrid, or the EP hybrid
of one site with the cavity.
"""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import DEFAULT_ENGINE, Engine, UnnormalizedDensity, gaussian_expect, hybrid_moments
from .errors import CavityNotNormalizable, IndefiniteCurvature, MaxIterations, NotPositiveDefinite
from .gaussian import (GaussianMoment, GaussianNat, divide, is_pd, log_pdf, moment_to_nat, multiply,
                       nat_log_density, nat_to_moment, symmetrize)
from .targets import FactorizedTarget, as_density

log = logging.getLogger(__name__)

METHODS = ("laplace", "gvb", "alpha", "ep_classical", "ep_smoothed")
EIGEN_FLOOR = 1e-8
FALLBACK_VARIANCE = 100.0


# ------------------------------------------------------------------ records

@dataclass
class UpdateRecord:
    sweep: int
    step: int
    method: str
    site: int | None
    new: GaussianNat
    center: np.ndarray
    e_grad: np.ndarray
    eh: np.ndarray
    damping: float
    err_est: float = 0.0
    global_q: GaussianMoment | None = None
    wall_ms: float | None = None
    kl_reverse: float | None = None

    @property
    def e_grad_norm(self) -> float:
        return float(np.linalg.norm(self.e_grad))


@dataclass
class IterationTrace:
    method: str
    d: int
    records: list = field(default_factory=list)
    converged: bool = False
    sweeps: int = 0
    final: GaussianMoment | None = None
    sites: list | None = None
    kl_is_exact: bool = True

    @property
    def means(self) -> list:
        return [r.global_q.mu.copy() for r in self.records if r.global_q is not None]


@dataclass(frozen=True)
class Schedule:
    """How updates are ordered and when to stop.

    ``kind`` is ``sequential`` (one site per update), ``parallel`` (all sites
    from a frozen snapshot) or ``custom`` (``subsets`` processed in order, each
    subset updated in parallel). ``damping=None`` picks 0 for sequential and
    0.5 for parallel EP.
    """

    kind: str = "sequential"
    max_sweeps: int = 200
    damping: float | None = None
    tol: float = 1e-8
    subsets: tuple | None = None
    workers: int = 1

    def __post_init__(self):
        if self.kind not in ("sequential", "parallel", "custom"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.damping is not None and not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.kind == "custom" and not self.subsets:
            raise ValueError("custom schedule needs subsets")

    def resolved_damping(self, ep: bool) -> float:
        if self.damping is not None:
            return float(self.damping)
        return 0.5 if (ep and self.kind == "parallel") else 0.0

    def subsets_for(self, n: int) -> list:
        if self.kind == "sequential":
            return [[i] for i in range(n)]
        if self.kind == "parallel":
            return [list(range(n))]
        subsets = [sorted(int(i) for i in s) for s in self.subsets]
        seen = {i for s in subsets for i in s}
        missing = set(range(n)) - seen
        if missing:
            raise ValueError(f"custom schedule never updates sites {sorted(missing)}")
        if any(i < 0 or i >= n for i in seen):
            raise ValueError(f"custom schedule index out of range for {n} sites")
        return subsets


# ------------------------------------------------------------------ helpers

def skeleton(center, e_grad, eh) -> GaussianNat:
    """Natural parameters of ``exp(-⟨E∇|θ-μ⟩ - ½⟨θ-μ|EH|θ-μ⟩)``."""
    eh = symmetrize(eh)
    center = np.asarray(center, dtype=float)
    return GaussianNat(eh @ center - np.asarray(e_grad, dtype=float), eh, role="site")


def _floor_eigen(eh: np.ndarray, regularize: bool, what: str) -> np.ndarray:
    eh = symmetrize(eh)
    if is_pd(eh):
        return eh
    if not regularize:
        raise IndefiniteCurvature(f"{what} is not positive definite")
    w, V = np.linalg.eigh(eh)
    log.warning("%s indefinite (min eigenvalue %.3g); flooring at %g", what, w.min(), EIGEN_FLOOR)
    return symmetrize((V * np.maximum(w, EIGEN_FLOOR)) @ V.T)


def damp(proposed: GaussianNat, old: GaussianNat, lam: float) -> GaussianNat:
    if lam == 0.0:
        return proposed
    return GaussianNat((1 - lam) * proposed.r + lam * old.r, (1 - lam) * proposed.B + lam * old.B, role="site")


def parse_method(text: str) -> tuple[str, float | None]:
    """``"alpha(0.9)"`` or ``"alpha:0.9"`` → ``("alpha", 0.9)``; others pass through."""
    text = text.strip()
    m = re.fullmatch(r"alpha\s*[(:=]\s*([0-9.eE+-]+)\s*\)?", text)
    if m:
        return "alpha", float(m.group(1))
    if text not in METHODS:
        raise ValueError(f"unknown method {text!r}; expected one of {METHODS} or alpha(<value>)")
    return text, None


def method_label(name: str, alpha: float | None) -> str:
    return f"alpha({alpha:g})" if name == "alpha" else name


# ------------------------------------------------------- single-Gaussian steps

def _newton_update(q: GaussianMoment, target, regularize=False):
    target = as_density(target)
    g = target.grad_psi(q.mu)
    H = _floor_eigen(target.hess_psi(q.mu), regularize, "Hessian of psi")
    return skeleton(q.mu, g, H), q.mu, g, H, 0.0


def newton_step(q: GaussianMoment, target, regularize: bool = False) -> GaussianMoment:
    """Gaussian built from the second-order expansion of ψ at the mean of q."""
    return nat_to_moment(_newton_update(q, target, regularize)[0])


def _gvb_update(q: GaussianMoment, target, engine: Engine, regularize=False):
    target = as_density(target)
    vals, err = gaussian_expect(q, {"g": target._g, "H": target._h}, engine)
    H = _floor_eigen(vals["H"], regularize, "E_q[Hessian of psi]")
    return skeleton(q.mu, vals["g"], H), q.mu, vals["g"], H, err


def gvb_step(q: GaussianMoment, target, engine: Engine = DEFAULT_ENGINE, regularize: bool = False) -> GaussianMoment:
    """Smoothed Newton step with gradient and Hessian averaged under q."""
    return nat_to_moment(_gvb_update(q, target, engine, regularize)[0])


def alpha_hybrid(q: GaussianMoment, target, alpha: float, engine: Engine = DEFAULT_ENGINE) -> UnnormalizedDensity:
    """``h ∝ q^α p^(1-α)`` with the inflated q as proposal."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    target = as_density(target)

    def logh(t):
        return alpha * log_pdf(q, t) - (1.0 - alpha) * target._f(t)

    return UnnormalizedDensity(q.d, logh, q.scaled(engine.inflation))


def alpha_hybrid_grad(q: GaussianMoment, target, alpha: float):
    """Gradient of ``-log h`` for the α-hybrid, for Stein checks."""
    target = as_density(target)
    P = q.precision
    return lambda t: (1.0 - alpha) * target._g(t) + alpha * (t - q.mu) @ P


def _alpha_update(q: GaussianMoment, target, alpha: float, engine: Engine, regularize=False):
    target = as_density(target)
    ms = hybrid_moments(alpha_hybrid(q, target, alpha, engine), target._g, engine)
    eh = _floor_eigen(ms.e_h, regularize, "alpha-hybrid EH")
    return skeleton(ms.mu_h, ms.e_grad, eh), ms.mu_h, ms.e_grad, eh, ms.err_est


def alpha_step(q: GaussianMoment, target, alpha: float, engine: Engine = DEFAULT_ENGINE,
               regularize: bool = False) -> GaussianMoment:
    """Smoothed step under the α-hybrid, centred at the hybrid mean."""
    return nat_to_moment(_alpha_update(q, target, alpha, engine, regularize)[0])


# ---------------------------------------------------------------------- EP

def cavity(i: int, sites, cavity_prior: GaussianNat | None = None) -> GaussianNat:
    """Product of all site approximations except ``i`` (plus an optional prior)."""
    d = sites[0].d
    r = np.zeros(d)
    B = np.zeros((d, d))
    for j, s in enumerate(sites):
        if j != i:
            r = r + s.r
            B = B + s.B
    if cavity_prior is not None:
        r = r + cavity_prior.r
        B = B + cavity_prior.B
    return GaussianNat(r, B, role="site")


def ep_build_hybrid(i: int, sites, target: FactorizedTarget, engine: Engine = DEFAULT_ENGINE,
                    cavity_prior: GaussianNat | None = None) -> UnnormalizedDensity:
    """``h_i ∝ f_i · ∏_{j≠i} q_j``; the proposal is the inflated global approximation."""
    cav = cavity(i, sites, cavity_prior)
    glob = multiply(cav, sites[i])
    if target.n == 1 and not np.any(cav.B) and not np.any(cav.r):
        # a lone site has a flat cavity: the hybrid is the target itself
        base = nat_to_moment(glob) if is_pd(glob.B) else _single_site_proposal(target)
    elif cav.indefinite:
        raise CavityNotNormalizable(f"cavity for site {i} has a non positive-definite precision")
    else:
        base = nat_to_moment(glob) if is_pd(glob.B) else nat_to_moment(cav)

    def logh(t):
        return nat_log_density(cav, t) - target.phi(i, t)

    return UnnormalizedDensity(target.d, logh, base.scaled(engine.inflation))


def _single_site_proposal(target) -> GaussianMoment:
    dens = as_density(target)
    if dens.reference_moments is not None:
        return dens.reference_moments
    q, _ = laplace(dens, schedule=Schedule(max_sweeps=100))
    return q


def _site_fns(i, target):
    return (lambda t: target.grad_phi(i, t)), (lambda t: target.hess_phi(i, t))


def ep_update_classical(i: int, sites, target: FactorizedTarget, engine: Engine = DEFAULT_ENGINE,
                        cavity_prior: GaussianNat | None = None, return_summary: bool = False):
    """Moment-match the hybrid, then divide out the cavity."""
    h = ep_build_hybrid(i, sites, target, engine, cavity_prior)
    g, _ = _site_fns(i, target)
    ms = hybrid_moments(h, g, engine)
    q_h = GaussianMoment(ms.mu_h, ms.cov_h)
    new = divide(moment_to_nat(q_h), cavity(i, sites, cavity_prior))
    return (new, ms) if return_summary else new


def ep_update_smoothed(i: int, sites, target: FactorizedTarget, engine: Engine = DEFAULT_ENGINE,
                       cavity_prior: GaussianNat | None = None, return_summary: bool = False):
    """Smoothed-gradient form of the EP site update.

    ``μ = E_h[θ]``, ``E∇ = E_h[∇φ_i]``, ``EH = Cov_h⁻¹ E_h[(θ-μ)∇φ_iᵀ]``.
    The cavity enters only through the hybrid, never through a division.
    """
    h = ep_build_hybrid(i, sites, target, engine, cavity_prior)
    g, _ = _site_fns(i, target)
    ms = hybrid_moments(h, g, engine)
    new = skeleton(ms.mu_h, ms.e_grad, ms.e_h)
    return (new, ms) if return_summary else new


class EPState:
    """Site approximations plus the bookkeeping for the initial fallback prior.

    Sites start at zero. Until every other site has been updated once, the
    cavity of site ``i`` also carries the fallback prior N(0, 100 I) so it is
    normalizable; after the first sweep the fallback drops out entirely.
    """

    def __init__(self, d: int, n: int, fallback_variance: float = FALLBACK_VARIANCE):
        self.d, self.n = d, n
        self.sites = [GaussianNat.zero(d) for _ in range(n)]
        self.updated = [False] * n
        self.fallback = GaussianNat(np.zeros(d), np.eye(d) / fallback_variance, role="site")

    def cavity_prior(self, i: int):
        pending = any(not u for j, u in enumerate(self.updated) if j != i)
        return self.fallback if pending else None

    def global_nat(self) -> GaussianNat:
        g = GaussianNat(sum(s.r for s in self.sites), sum(s.B for s in self.sites), role="site")
        return multiply(g, self.fallback) if not all(self.updated) else g

    def global_moment(self) -> GaussianMoment | None:
        try:
            return nat_to_moment(self.global_nat())
        except NotPositiveDefinite:
            return None


# ------------------------------------------------------------------- driver

def _kl_fn(target, engine):
    from .divergence import kl_reverse, target_log_z

    dens = as_density(target)
    log_z = target_log_z(dens, engine) if dens.d <= 4 else None
    exact = log_z is not None

    def kl(q):
        try:
            return kl_reverse(q, dens, engine, log_z=log_z).value
        except Exception as exc:  # diagnostics only; a failed KL never stops a run
            log.debug("kl_reverse failed: %s", exc)
            return None

    return kl, exact


def run(method: str, target, init: GaussianMoment | None = None, schedule: Schedule | None = None,
        engine: Engine = DEFAULT_ENGINE, alpha: float | None = None, kl: bool = True,
        timing: bool = False):
    """Iterate ``method`` to convergence.

    Returns ``(approximation, trace)``. Non-convergence is reported through
    ``trace.converged`` with the last iterate, not raised.
    """
    name, parsed_alpha = parse_method(method)
    alpha = parsed_alpha if parsed_alpha is not None else alpha
    if name == "alpha" and alpha is None:
        raise ValueError("method alpha needs an alpha value")
    schedule = schedule or Schedule()
    label = method_label(name, alpha)
    trace = IterationTrace(method=label, d=target.d)
    kl_fn, trace.kl_is_exact = _kl_fn(target, engine) if kl else (None, False)
    if name.startswith("ep"):
        if not isinstance(target, FactorizedTarget):
            raise TypeError("EP needs a FactorizedTarget")
        return _run_ep(name, target, schedule, engine, trace, kl_fn, timing)
    return _run_global(name, target, init, schedule, engine, alpha, trace, kl_fn, timing)


def _run_global(name, target, init, schedule, engine, alpha, trace, kl_fn, timing):
    q = init if init is not None else GaussianMoment.standard(target.d)
    lam = schedule.resolved_damping(ep=False)
    step = 0
    for sweep in range(1, schedule.max_sweeps + 1):
        t0 = time.perf_counter()
        if name == "laplace":
            proposed, center, e_grad, eh, err = _newton_update(q, target, regularize=True)
        elif name == "gvb":
            proposed, center, e_grad, eh, err = _gvb_update(q, target, engine, regularize=True)
        else:
            proposed, center, e_grad, eh, err = _alpha_update(q, target, alpha, engine, regularize=True)
        old = moment_to_nat(q)
        new = damp(proposed, old, lam)
        q = nat_to_moment(new)
        step += 1
        rec = UpdateRecord(sweep, step, trace.method, None, proposed, center, e_grad, eh, lam, err, q,
                           (time.perf_counter() - t0) * 1e3 if timing else None)
        if kl_fn is not None:
            rec.kl_reverse = kl_fn(q)
        trace.records.append(rec)
        trace.sweeps = sweep
        if np.max(np.abs(new.flat() - old.flat())) < schedule.tol:
            trace.converged = True
            break
    trace.final = q
    return q, trace


def _run_ep(name, target, schedule, engine, trace, kl_fn, timing):
    update = ep_update_classical if name == "ep_classical" else ep_update_smoothed
    state = EPState(target.d, target.n)
    lam = schedule.resolved_damping(ep=True)
    subsets = schedule.subsets_for(target.n)
    prev = state.global_nat()
    step = 0
    for sweep in range(1, schedule.max_sweeps + 1):
        for subset in subsets:
            frozen = list(state.sites)
            priors = {i: state.cavity_prior(i) for i in subset}

            def one(i):
                t0 = time.perf_counter()
                new, ms = update(i, frozen, target, engine, cavity_prior=priors[i], return_summary=True)
                return i, new, ms, (time.perf_counter() - t0) * 1e3

            if schedule.workers > 1 and len(subset) > 1:
                with ThreadPoolExecutor(max_workers=schedule.workers) as pool:
                    results = list(pool.map(one, subset))
            else:
                results = [one(i) for i in subset]
            for i, new, ms, ms_time in results:
                state.sites[i] = damp(new, frozen[i], lam)
                state.updated[i] = True
            for i, new, ms, ms_time in results:
                step += 1
                # classical updates: report the smoothed quantities implied by the new site
                e_grad = new.B @ ms.mu_h - new.r
                trace.records.append(UpdateRecord(sweep, step, trace.method, i, new, ms.mu_h, e_grad, new.B, lam,
                                                  ms.err_est, state.global_moment(), ms_time if timing else None))
        cur = state.global_nat()
        trace.sweeps = sweep
        if kl_fn is not None and trace.records[-1].global_q is not None:
            trace.records[-1].kl_reverse = kl_fn(trace.records[-1].global_q)
        if all(state.updated) and np.max(np.abs(cur.flat() - prev.flat())) < schedule.tol:
            trace.converged = True
            break
        prev = cur
    trace.sites = list(state.sites)
    final = state.global_moment()
    if final is None:
        raise NotPositiveDefinite("EP global approximation is not positive definite")
    trace.final = final
    return final, trace


def laplace(target, init: GaussianMoment | None = None, schedule: Schedule | None = None):
    """Laplace approximation via the Gaussian-iterating Newton method.

    Raises :class:`MaxIterations` (carrying the last iterate) if not converged.
    """
    q, trace = run("laplace", target, init, schedule, kl=False)
    if not trace.converged:
        raise MaxIterations(f"laplace did not converge in {trace.sweeps} sweeps", q, trace)
    return q, trace
