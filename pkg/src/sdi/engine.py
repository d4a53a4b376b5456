"""Expectations under Gaussian and unnormalized (hybrid) densities.

Three quadrature rules are available, chosen by dimension unless forced:

* ``grid1d``: trapezoid rule on ``mean ± 10 std`` of the proposal (1-d only);
* ``gh_importance``: tensorized Gauss-Hermite nodes of the proposal with the
  importance correction ``h / proposal``;
* ``monte_carlo``: scrambled Sobol draws from the proposal, self-normalized.

Every estimate is computed at two resolutions and the absolute difference is
reported as ``err_est``, plus a round-off floor. Hybrid integrals use two
passes: the first locates the density, the second re-centres the proposal on
the first-pass mean and covariance. A proposal that is far too wide or badly
placed is narrowed and moved over a few extra locating passes first.
Expectations under a Gaussian use Gauss-Hermite nodes, or the grid in
``grid1d`` mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import cho_solve
from scipy.special import logsumexp, ndtri
from scipy.stats import qmc

from .errors import BudgetExceeded, DegenerateMass, DimensionMismatch, NotPositiveDefinite
from .gaussian import GaussianMoment, cholesky_lower, symmetrize

MODES = ("auto", "grid1d", "gh_importance", "monte_carlo")
ROUND_FLOOR = 1e-12
BOX_HALF_WIDTH = 10.0


@dataclass(frozen=True)
class Engine:
    mode: str = "auto"
    nodes: int = 4097
    order: int = 32
    mc_draws: int = 2 ** 16
    mc_seed: int = 0
    inflation: float = 2.0
    refine_inflation: float = 1.0
    node_cap: int = 2 ** 21

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"engine mode must be one of {MODES}, got {self.mode!r}")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.nodes < 5:
            raise ValueError("nodes must be >= 5")
        if self.inflation < 1.0 or self.refine_inflation < 1.0:
            raise ValueError("inflation factors must be >= 1")
        if self.mc_draws < 4:
            raise ValueError("mc_draws must be >= 4")

    def resolve(self, d: int) -> str:
        if self.mode != "auto":
            if self.mode == "grid1d" and d != 1:
                raise DimensionMismatch("grid1d mode needs d = 1")
            return self.mode
        if d == 1:
            return "grid1d"
        if d <= 4:
            return "gh_importance"
        return "monte_carlo"

    def with_(self, **kw) -> "Engine":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "nodes": self.nodes, "order": self.order, "mc_draws": self.mc_draws,
                "mc_seed": self.mc_seed, "inflation": self.inflation,
                "refine_inflation": self.refine_inflation, "node_cap": self.node_cap}


DEFAULT_ENGINE = Engine()


@dataclass(frozen=True)
class UnnormalizedDensity:
    """``h(θ) ∝ exp(log_density(θ))`` plus a Gaussian used to place quadrature nodes."""

    d: int
    log_density: Callable[[np.ndarray], np.ndarray]
    proposal: GaussianMoment

    def __post_init__(self):
        if self.proposal.d != self.d:
            raise DimensionMismatch("proposal dimension does not match density")


@dataclass(frozen=True, eq=False)
class MomentSummary:
    mu_h: np.ndarray
    cov_h: np.ndarray
    e_grad: np.ndarray
    e_cross: np.ndarray
    e_h: np.ndarray
    log_z: float
    err_est: float
    e_hess: np.ndarray | None = None
    errors: dict = field(default_factory=dict, repr=False)


# ------------------------------------------------------------------ rules

def _gh_tensor(d: int, order: int, node_cap: int):
    if order ** d > node_cap:
        raise BudgetExceeded(f"{order}^{d} = {order ** d} nodes exceeds cap {node_cap}")
    z1, w1 = hermegauss(order)
    w1 = w1 / math.sqrt(2 * math.pi)
    grids = np.meshgrid(*([z1] * d), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=1)
    logw = np.zeros(z.shape[0])
    for g in np.meshgrid(*([np.log(w1)] * d), indexing="ij"):
        logw += g.ravel()
    return z, logw


def gauss_hermite_rule(q: GaussianMoment, order: int, node_cap: int = DEFAULT_ENGINE.node_cap):
    """Nodes and log-weights with ``E_q[f] ≈ Σ exp(logw) f(nodes)``."""
    z, logw = _gh_tensor(q.d, order, node_cap)
    return q.mu + z @ q.sqrt.T, logw


def gauss_hermite_expect(q: GaussianMoment, f, order: int, node_cap: int = DEFAULT_ENGINE.node_cap):
    """Tensorized Gauss-Hermite estimate of ``E_q[f(θ)]``.

    ``f`` maps a batch ``(N, d)`` to an array with leading axis ``N``. Exact for
    polynomials of degree ``≤ 2·order − 1`` in each coordinate.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    pts, logw = gauss_hermite_rule(q, order, node_cap)
    vals = np.asarray(f(pts), dtype=float)
    w = np.exp(logw)
    return np.tensordot(w, vals, axes=(0, 0))


def _log_gauss(q: GaussianMoment, pts: np.ndarray) -> np.ndarray:
    z = q.whiten(pts)
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * q.log_det_sigma() - 0.5 * q.d * math.log(2 * math.pi)


def _lebesgue_rules(prop: GaussianMoment, engine: Engine, mode: str):
    """(fine, coarse) rules with ``∫g ≈ Σ exp(logw) g(pts)`` for any integrand."""
    if mode == "grid1d":
        n = engine.nodes if engine.nodes % 2 == 1 else engine.nodes + 1
        if n > engine.node_cap:
            raise BudgetExceeded(f"{n} grid nodes exceeds cap {engine.node_cap}")
        sd = float(prop.sqrt[0, 0])
        x = np.linspace(prop.mu[0] - BOX_HALF_WIDTH * sd, prop.mu[0] + BOX_HALF_WIDTH * sd, n)
        out = []
        for step in (1, 2):
            xs = x[::step]
            h = xs[1] - xs[0]
            w = np.full(xs.size, h)
            w[0] = w[-1] = 0.5 * h
            out.append((xs[:, None], np.log(w)))
        return out
    if mode == "gh_importance":
        out = []
        for order in (engine.order, max(1, engine.order // 2)):
            pts, logw = gauss_hermite_rule(prop, order, engine.node_cap)
            out.append((pts, logw - _log_gauss(prop, pts)))
        return out
    if mode == "monte_carlo":
        pts = _sobol_points(prop, engine)
        logq = _log_gauss(prop, pts)
        n = pts.shape[0]
        half = n // 2
        return [(pts, -math.log(n) - logq), (pts[:half], -math.log(half) - logq[:half])]
    raise ValueError(f"unknown mode {mode!r}")


def _sobol_points(q: GaussianMoment, engine: Engine) -> np.ndarray:
    if engine.mc_draws > engine.node_cap:
        raise BudgetExceeded(f"{engine.mc_draws} draws exceeds cap {engine.node_cap}")
    m = int(math.ceil(math.log2(engine.mc_draws)))
    u = qmc.Sobol(d=q.d, scramble=True, seed=engine.mc_seed).random_base2(m)[: engine.mc_draws]
    z = ndtri(np.clip(u, 1e-16, 1 - 1e-16))
    return q.mu + z @ q.sqrt.T


def _gaussian_rules(q: GaussianMoment, engine: Engine):
    """(fine, coarse) expectation rules under q itself: weights sum to one."""
    mode = engine.resolve(q.d)
    if mode == "grid1d":
        return [(pts, logw + _log_gauss(q, pts)) for pts, logw in _lebesgue_rules(q, engine, mode)]
    if mode == "monte_carlo":
        pts = _sobol_points(q, engine)
        n = pts.shape[0]
        half = n // 2
        return [(pts, np.full(n, -math.log(n))), (pts[:half], np.full(half, -math.log(half)))]
    return [gauss_hermite_rule(q, o, engine.node_cap) for o in (engine.order, max(1, engine.order // 2))]


# ------------------------------------------------------------- integration

def _floor(values) -> float:
    scale = max((float(np.max(np.abs(v))) for v in values if np.size(v)), default=0.0)
    return ROUND_FLOOR * (1.0 + scale)


def _combine(fine: dict, coarse: dict, keys=None) -> tuple[float, dict]:
    keys = fine.keys() if keys is None else keys
    errs = {}
    for k in keys:
        a, b = np.asarray(fine[k], dtype=float), np.asarray(coarse[k], dtype=float)
        errs[k] = float(np.max(np.abs(a - b))) if a.size else 0.0
    err = max(errs.values(), default=0.0) + _floor([fine[k] for k in keys])
    return err, errs


def _weights(h: UnnormalizedDensity, pts: np.ndarray, logw: np.ndarray):
    logh = np.asarray(h.log_density(pts), dtype=float).reshape(-1)
    logm = logw + logh
    logm = np.where(np.isnan(logm), -np.inf, logm)
    log_z = logsumexp(logm)
    if not np.isfinite(log_z):
        raise DegenerateMass("normalizer of the unnormalized density underflowed on every node")
    return np.exp(logm - log_z), float(log_z), logh


RELOCATE_RATIO, RELOCATE_SHIFT, RELOCATE_SHRINK, MAX_RELOCATE = 0.05, 3.0, 16.0, 6


def _mean_cov(pts, W):
    mu = W @ pts
    c = pts - mu
    cov = symmetrize((c * W[:, None]).T @ c)
    return mu, cov


def _whitened_cov(prop: GaussianMoment, cov):
    Li = np.linalg.inv(prop.sqrt)
    return symmetrize(Li @ cov @ Li.T)


def _poorly_located(prop: GaussianMoment, mu, cov) -> bool:
    """True when the moments found on ``prop`` are far narrower than it or far off its centre."""
    z = prop.whiten((mu - prop.mu)[None, :])[0]
    ratio = np.linalg.eigvalsh(_whitened_cov(prop, cov))
    return bool(ratio.min() < RELOCATE_RATIO or np.abs(z).max() > RELOCATE_SHIFT)


def _shrunk_proposal(prop: GaussianMoment, mu, cov) -> GaussianMoment:
    """Move to ``mu`` and narrow towards ``cov``, by at most a factor ``RELOCATE_SHRINK`` in variance."""
    vals, vecs = np.linalg.eigh(_whitened_cov(prop, cov))
    C = (vecs * np.maximum(vals, 1.0 / RELOCATE_SHRINK)) @ vecs.T
    return GaussianMoment(mu, symmetrize(prop.sqrt @ C @ prop.sqrt.T))


def located_proposal(h: UnnormalizedDensity, engine: Engine) -> GaussianMoment:
    """First pass: moments of h on its own proposal, scaled by ``refine_inflation`` for the final rule.

    When the proposal turns out to be badly placed or far too wide, it is moved
    and narrowed step by step and the pass repeated (at most ``MAX_RELOCATE``
    times). Each step narrows by a bounded factor, because the moments found on
    a much too wide rule rest on a handful of nodes.
    """
    mode = engine.resolve(h.d)
    prop = h.proposal
    for k in range(MAX_RELOCATE):
        pts, logw = _lebesgue_rules(prop, engine, mode)[0]
        W, _, _ = _weights(h, pts, logw)
        mu, cov = _mean_cov(pts, W)
        last = mode == "grid1d" or k == MAX_RELOCATE - 1
        if last or not _poorly_located(prop, mu, cov):
            try:
                return GaussianMoment(mu, engine.refine_inflation * cov)
            except NotPositiveDefinite:
                return prop
        prop = _shrunk_proposal(prop, mu, cov)
    return prop


def integrate(h: UnnormalizedDensity, evaluate, engine: Engine = DEFAULT_ENGINE):
    """Run ``evaluate(pts, W, logh)`` under the self-normalized h at two resolutions.

    ``evaluate`` returns a dict of arrays. Returns ``(fine_values, err_est,
    per_key_errors, log_z)`` where ``log_z`` estimates ``log ∫ exp(log_density)``.
    """
    prop = located_proposal(h, engine)
    mode = engine.resolve(h.d)
    results = []
    for pts, logw in _lebesgue_rules(prop, engine, mode):
        W, log_z, logh = _weights(h, pts, logw)
        vals = dict(evaluate(pts, W, logh))
        vals["log_z"] = log_z
        results.append(vals)
    err, errs = _combine(results[0], results[1])
    return results[0], err, errs, results[0]["log_z"]


def _solve_spd(A, B):
    L = cholesky_lower(A)
    return cho_solve((L, True), B)


def hybrid_moments(h: UnnormalizedDensity, phi_grad, engine: Engine = DEFAULT_ENGINE, phi_hess=None) -> MomentSummary:
    """Moments of h and smoothed-gradient quantities of a site energy φ under h.

    ``e_h = cov_h⁻¹ E_h[(θ-μ_h)∇φᵀ]`` is symmetrized. ``err_est`` also covers
    the derived natural parameters ``cov_h⁻¹``, ``cov_h⁻¹μ_h`` and ``e_h μ_h``
    so that both EP update paths can be compared against it.
    """

    def evaluate(pts, W, logh):
        mu, cov = _mean_cov(pts, W)
        g = np.asarray(phi_grad(pts), dtype=float).reshape(pts.shape)
        e_grad = W @ g
        e_cross = ((pts - mu) * W[:, None]).T @ g
        prec = _solve_spd(cov, np.eye(h.d))
        prec = symmetrize(prec)
        e_h = symmetrize(prec @ e_cross)
        out = {"mu_h": mu, "cov_h": cov, "e_grad": e_grad, "e_cross": e_cross, "e_h": e_h,
               "prec": prec, "prec_mu": prec @ mu, "e_h_mu": e_h @ mu}
        if phi_hess is not None:
            out["e_hess"] = np.tensordot(W, np.asarray(phi_hess(pts), dtype=float), axes=(0, 0))
        return out

    vals, err, errs, log_z = integrate(h, evaluate, engine)
    return MomentSummary(vals["mu_h"], vals["cov_h"], vals["e_grad"], vals["e_cross"], vals["e_h"],
                         log_z, err, vals.get("e_hess"), errs)


def stein_residuals(h: UnnormalizedDensity, full_grad, v, engine: Engine = DEFAULT_ENGINE, return_err: bool = False):
    """``(E_h[∇ψ_h], E_h[(θ-v)∇ψ_hᵀ] - I)`` where ψ_h = -log h.

    Both vanish for any density with fast-decaying tails, for every ``v``.
    """
    v = np.asarray(v, dtype=float).reshape(-1)

    def evaluate(pts, W, logh):
        g = np.asarray(full_grad(pts), dtype=float).reshape(pts.shape)
        return {"first": W @ g, "second": ((pts - v) * W[:, None]).T @ g - np.eye(h.d)}

    vals, err, _, _ = integrate(h, evaluate, engine)
    if return_err:
        return vals["first"], vals["second"], err
    return vals["first"], vals["second"]


def gaussian_expect(q: GaussianMoment, fns: dict, engine: Engine = DEFAULT_ENGINE):
    """Expectations of several functions under q at two resolutions.

    Returns ``(values, err_est)``.
    """
    results = []
    for pts, logw in _gaussian_rules(q, engine):
        w = np.exp(logw)
        results.append({k: np.tensordot(w, np.asarray(f(pts), dtype=float), axes=(0, 0)) for k, f in fns.items()})
    err, _ = _combine(results[0], results[1])
    return results[0], err


def expect(h: UnnormalizedDensity, fns: dict, engine: Engine = DEFAULT_ENGINE):
    """Self-normalized expectations of several functions under h.

    Each function is called as ``f(pts, logh)`` with the nodes and the
    unnormalized log density there. Returns ``(values, err_est, log_z)``.
    """

    def evaluate(pts, W, logh):
        out = {}
        for k, f in fns.items():
            out[k] = np.tensordot(W, np.asarray(f(pts, logh), dtype=float), axes=(0, 0))
        return out

    vals, err, _, log_z = integrate(h, evaluate, engine)
    return vals, err, log_z
