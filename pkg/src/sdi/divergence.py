"""Divergences between a Gaussian and a target, with their ``(μ, S)`` gradients.

The α-divergence follows the convention

    D_α(p, q) = (1 - ∫ p^(1-α) q^α) / (α (1 - α)),

which tends to KL(p, q) as α → 0 and to KL(q, p) as α → 1.

Gradients with respect to the lower-triangular square root ``S`` are returned
as ``∂D/∂S[a, b]`` restricted to the lower triangle (the entries that are free
parameters of the triangular factor).
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .engine import DEFAULT_ENGINE, Engine, UnnormalizedDensity, expect, gaussian_expect
from .errors import DegenerateMass, DivergentIntegral
from .gaussian import GaussianMoment, log_pdf
from .targets import as_density

_LOG_Z_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


@dataclass
class DivergenceReport:
    value: float
    alpha: float | str
    grad_mu: np.ndarray | None = None
    grad_S: np.ndarray | None = None
    err_est: float = 0.0
    normalized: bool = True
    prefactor: float | None = None
    extras: dict = field(default_factory=dict)


def _entropy_term(q: GaussianMoment) -> float:
    """``E_q[log q]``."""
    return -0.5 * q.d * (1.0 + math.log(2 * math.pi)) - 0.5 * q.log_det_sigma()


def target_proposal(target) -> GaussianMoment:
    """A Gaussian near the target: its reference moments or its Laplace approximation."""
    target = as_density(target)
    if target.reference_moments is not None:
        return target.reference_moments
    from .approximators import Schedule, run

    q, _ = run("laplace", target, schedule=Schedule(max_sweeps=100), kl=False)
    return q


def target_log_z(target, engine: Engine = DEFAULT_ENGINE) -> float:
    """``log ∫ exp(-ψ)``: exact when the target carries it, otherwise by quadrature."""
    target = as_density(target)
    if target.log_z is not None:
        return float(target.log_z)
    cache = _LOG_Z_CACHE.setdefault(target, {})
    if engine not in cache:
        h = UnnormalizedDensity(target.d, lambda t: -target._f(t), target_proposal(target).scaled(engine.inflation))
        _, _, log_z = expect(h, {}, engine)
        cache[engine] = log_z
    return cache[engine]


def kl_reverse(q: GaussianMoment, target, engine: Engine = DEFAULT_ENGINE,
               log_z: float | None = None) -> DivergenceReport:
    """``KL(q, p) = E_q[ψ] + E_q[log q] + log Z_p``.

    When ``log Z_p`` is unknown and not supplied, the value omits it and the
    report is flagged ``normalized=False``.
    """
    target = as_density(target)
    if log_z is None:
        log_z = target.log_z
    vals, err = gaussian_expect(q, {"psi": target._f}, engine)
    value = float(vals["psi"]) + _entropy_term(q)
    normalized = log_z is not None
    if normalized:
        value += log_z
    return DivergenceReport(value, "kl_reverse", err_est=err, normalized=normalized)


def _tril_grad(G: np.ndarray) -> np.ndarray:
    return np.tril(G)


def kl_gradients(q: GaussianMoment, target, engine: Engine = DEFAULT_ENGINE) -> DivergenceReport:
    """Reverse-KL value and gradients in ``(μ, S)``.

    ``∇_μ = E_q[∇ψ]`` and ``∇_S = E_q[Hψ] S - S⁻ᵀ`` (lower triangle).
    """
    target = as_density(target)
    vals, err = gaussian_expect(q, {"psi": target._f, "g": target._g, "H": target._h}, engine)
    S = q.sqrt
    S_inv_T = solve_triangular(S, np.eye(q.d), lower=True).T
    grad_S = _tril_grad(vals["H"] @ S - S_inv_T)
    value = float(vals["psi"]) + _entropy_term(q)
    normalized = target.log_z is not None
    if normalized:
        value += target.log_z
    return DivergenceReport(value, "kl_reverse", vals["g"], grad_S, err, normalized)


def _alpha_density(target, q: GaussianMoment, alpha: float, log_z: float, engine: Engine) -> UnnormalizedDensity:
    target = as_density(target)

    def logh(t):
        return (1.0 - alpha) * (-target._f(t) - log_z) + alpha * log_pdf(q, t)

    if 0.0 < alpha < 1.0:
        prop = q.scaled(engine.inflation)
    else:
        prop = target_proposal(target).scaled(engine.inflation)
    return UnnormalizedDensity(q.d, logh, prop)


def _check_tails(h: UnnormalizedDensity, q: GaussianMoment, p_ref: GaussianMoment) -> None:
    """Raise DivergentIntegral if the log integrand fails to decay along probe rays.

    Only the far radii are probed: a convergent integrand may still rise a few
    standard deviations out before its quadratic decay takes over.
    """
    d = q.d
    dirs = []
    for base in (q, p_ref):
        for k in range(d):
            for sgn in (1.0, -1.0):
                dirs.append((base.mu, sgn * base.sqrt[:, k]))
    radii = np.array([10.0, 20.0, 40.0])
    for origin, direction in dirs:
        pts = origin + radii[:, None] * direction
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.asarray(h.log_density(pts), dtype=float)
        if np.any(np.isnan(v)) or np.any(v == np.inf):
            raise DivergentIntegral("integrand is not finite under the engine window")
        v = np.where(np.isneginf(v), -1e300 - np.arange(v.size), v)
        if not np.all(np.diff(v) < 0):
            raise DivergentIntegral("integrand does not decay under the engine window")


def d_alpha(target, q: GaussianMoment, alpha: float, engine: Engine = DEFAULT_ENGINE) -> DivergenceReport:
    """α-divergence ``D_α(p, q)`` for ``α ∉ {0, 1}``.

    For α in {1/2, -1, 2} the report's ``extras["special"]`` holds the
    squared-Hellinger or χ² value integrated directly from its own formula,
    with its error estimate in ``extras["special_err"]``.
    """
    alpha = float(alpha)
    if alpha in (0.0, 1.0):
        raise ValueError("alpha must not be 0 or 1; use kl_forward / kl_reverse")
    dens = as_density(target)
    log_z = target_log_z(dens, engine)
    h = _alpha_density(dens, q, alpha, log_z, engine)
    if not 0.0 < alpha < 1.0:
        _check_tails(h, q, target_proposal(dens))
    _, err, log_i = expect(h, {}, engine)
    value = -math.expm1(log_i) / (alpha * (1.0 - alpha))
    rep = DivergenceReport(value, alpha, err_est=abs(math.exp(log_i)) * err / abs(alpha * (1.0 - alpha)),
                           normalized=True)
    rep.extras["log_integral"] = log_i
    special = _special_case(dens, q, alpha, log_z, h.proposal, engine)
    if special is not None:
        rep.extras["special"], rep.extras["special_err"] = special
    return rep


def _log_abs_diff(a, b):
    """``log|e^a - e^b|`` computed without cancellation; -inf where a == b."""
    hi = np.maximum(a, b)
    with np.errstate(divide="ignore"):
        return hi + np.log(-np.expm1(-np.abs(a - b)))


def _special_case(target, q, alpha, log_z, proposal, engine):
    """Directly integrated Hellinger / χ² value and its error estimate, or None.

    Each formula is integrated as its own nonnegative integrand on a proposal
    located for that integrand, independently of the generic overlap integral.
    """
    def log_p(t):
        return -target._f(t) - log_z

    if alpha == 0.5:
        # 2 ∫(√p - √q)²
        scale = 2.0
        log_g = lambda t: 2.0 * _log_abs_diff(0.5 * log_p(t), 0.5 * log_pdf(q, t))
    elif alpha == -1.0:
        # ½ ∫(p - q)²/q
        scale = 0.5
        log_g = lambda t: 2.0 * _log_abs_diff(log_p(t), log_pdf(q, t)) - log_pdf(q, t)
    elif alpha == 2.0:
        # ½ ∫(p - q)²/p
        scale = 0.5
        log_g = lambda t: 2.0 * _log_abs_diff(log_p(t), log_pdf(q, t)) - log_p(t)
    else:
        return None
    try:
        _, err, log_i = expect(UnnormalizedDensity(q.d, log_g, proposal), {}, engine)
    except DegenerateMass:
        # p and q agree on every node
        return 0.0, 0.0
    value = scale * math.exp(log_i)
    return value, value * err


def d_alpha_gradients(target, q: GaussianMoment, alpha: float, engine: Engine = DEFAULT_ENGINE) -> DivergenceReport:
    """Gradients of ``D_α(p, q_{μ,S})`` as expectations under the α-hybrid.

    With ``c = ∫p^(1-α) q^α / α``:
    ``∇_μ = c E_h[∇ψ]`` and ``∇_S = c (E_h[∇ψ (θ-μ)ᵀ] - I) S⁻ᵀ`` (lower triangle).
    ``extras`` carries the two critical-point residuals without the prefactor.
    """
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError("gradients are provided for alpha in (0, 1)")
    dens = as_density(target)
    log_z = target_log_z(dens, engine)
    h = _alpha_density(dens, q, alpha, log_z, engine)
    mu = q.mu
    fns = {"g": lambda t, lh: dens._g(t),
           "cross": lambda t, lh: np.einsum("ni,nj->nij", dens._g(t), t - mu)}
    vals, err, log_i = expect(h, fns, engine)
    c = math.exp(log_i) / alpha
    S_inv_T = solve_triangular(q.sqrt, np.eye(q.d), lower=True).T
    resid = vals["cross"] - np.eye(q.d)
    grad_S = _tril_grad(c * resid @ S_inv_T)
    value = -math.expm1(log_i) / (alpha * (1.0 - alpha))
    rep = DivergenceReport(value, alpha, c * vals["g"], grad_S, err * max(1.0, c), True, c)
    rep.extras["e_grad"] = vals["g"]
    rep.extras["cross_minus_identity"] = resid.T
    return rep


def kl_forward(target, q: GaussianMoment, engine: Engine = DEFAULT_ENGINE) -> DivergenceReport:
    """``KL(p, q) = ∫ p log(p/q)`` with p normalized by its (exact or computed) log Z."""
    dens = as_density(target)
    log_z = target_log_z(dens, engine)
    h = UnnormalizedDensity(dens.d, lambda t: -dens._f(t), target_proposal(dens).scaled(engine.inflation))
    vals, err, _ = expect(h, {"v": lambda t, lh: lh - log_z - log_pdf(q, t)}, engine)
    return DivergenceReport(float(vals["v"]), "kl_forward", err_est=err)


def kl_density_to_gaussian(h: UnnormalizedDensity, q: GaussianMoment, engine: Engine = DEFAULT_ENGINE) -> float:
    """``KL(h, q)`` for an unnormalized density h (normalized internally)."""
    vals, _, log_z = expect(h, {"v": lambda t, lh: lh - log_pdf(q, t)}, engine)
    return float(vals["v"]) - log_z


def gaussian_kl(a: GaussianMoment, b: GaussianMoment) -> float:
    """Closed-form ``KL(a, b)`` between two Gaussians."""
    Pb = b.precision
    dm = b.mu - a.mu
    return 0.5 * (np.trace(Pb @ a.sigma) + dm @ Pb @ dm - a.d + b.log_det_sigma() - a.log_det_sigma())
