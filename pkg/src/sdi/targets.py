"""Target densities ``p(θ) = exp(-ψ(θ))`` and factorized targets ``p = ∏ f_i``.

All evaluators are vectorized: they take a batch of points of shape ``(N, d)``
and return ``(N,)``, ``(N, d)`` and ``(N, d, d)`` arrays for the energy, its
gradient and its Hessian. The public ``psi``/``grad_psi``/``hess_psi`` methods
also accept a single point of shape ``(d,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit, log_ndtr

from .errors import BadLabel, DimensionMismatch
from .gaussian import GaussianMoment, spd_inverse

BatchFn = Callable[[np.ndarray], np.ndarray]

FD_STEP = 1e-5
FD_HESS_STEP = 1e-4


def _fd_grad(psi: BatchFn, theta: np.ndarray) -> np.ndarray:
    n, d = theta.shape
    out = np.empty((n, d))
    for j in range(d):
        h = FD_STEP * (1.0 + np.abs(theta[:, j]))
        tp, tm = theta.copy(), theta.copy()
        tp[:, j] += h
        tm[:, j] -= h
        out[:, j] = (psi(tp) - psi(tm)) / (2 * h)
    return out


def _fd_hess_from_grad(grad: BatchFn, theta: np.ndarray) -> np.ndarray:
    n, d = theta.shape
    out = np.empty((n, d, d))
    for j in range(d):
        h = FD_STEP * (1.0 + np.abs(theta[:, j]))
        tp, tm = theta.copy(), theta.copy()
        tp[:, j] += h
        tm[:, j] -= h
        out[:, :, j] = (grad(tp) - grad(tm)) / (2 * h)[:, None]
    return 0.5 * (out + out.transpose(0, 2, 1))


def _fd_hess_from_psi(psi: BatchFn, theta: np.ndarray) -> np.ndarray:
    # second differences of psi itself; nested first differences lose ~half the digits
    n, d = theta.shape
    out = np.empty((n, d, d))
    f0 = psi(theta)
    h = FD_HESS_STEP * (1.0 + np.abs(theta))
    for j in range(d):
        tp, tm = theta.copy(), theta.copy()
        tp[:, j] += h[:, j]
        tm[:, j] -= h[:, j]
        out[:, j, j] = (psi(tp) - 2 * f0 + psi(tm)) / h[:, j] ** 2
        for k in range(j):
            def shifted(sj, sk):
                t = theta.copy()
                t[:, j] += sj * h[:, j]
                t[:, k] += sk * h[:, k]
                return psi(t)
            v = (shifted(1, 1) - shifted(1, -1) - shifted(-1, 1) + shifted(-1, -1)) / (4 * h[:, j] * h[:, k])
            out[:, j, k] = out[:, k, j] = v
    return out


def _batch(theta, d: int) -> tuple[np.ndarray, bool]:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim <= 1:
        theta = theta.reshape(1, -1)
        single = True
    else:
        single = False
    if theta.shape[1] != d:
        raise DimensionMismatch(f"theta has dimension {theta.shape[1]}, expected {d}")
    return theta, single


class _Energy:
    """Shared single-point / batch dispatch for anything with batch ``_f/_g/_h``."""

    d: int

    def _f(self, theta):
        raise NotImplementedError

    def _g(self, theta):
        raise NotImplementedError

    def _h(self, theta):
        raise NotImplementedError

    def psi(self, theta):
        t, single = _batch(theta, self.d)
        v = self._f(t)
        return float(v[0]) if single else v

    def grad_psi(self, theta):
        t, single = _batch(theta, self.d)
        v = self._g(t)
        return v[0] if single else v

    def hess_psi(self, theta):
        t, single = _batch(theta, self.d)
        v = self._h(t)
        return v[0] if single else v


class TargetDensity(_Energy):
    """Energy ``ψ`` with gradient and Hessian oracles.

    ``grad`` and ``hess`` may be omitted, in which case central finite
    differences of ``psi`` are used. ``log_z`` is ``log ∫exp(-ψ)`` when known
    (0 for built-in Gaussian targets, whose ψ includes the normalizer).
    """

    def __init__(self, d: int, psi: BatchFn, grad: BatchFn | None = None, hess: BatchFn | None = None,
                 convex: bool = False, reference_moments: GaussianMoment | None = None,
                 log_z: float | None = None, name: str = "custom"):
        self.d = int(d)
        self._psi_fn = psi
        self._grad_fn = grad
        self._hess_fn = hess
        self.convex = bool(convex)
        self.reference_moments = reference_moments
        self.log_z = log_z
        self.name = name

    def _f(self, theta):
        return np.asarray(self._psi_fn(theta), dtype=float).reshape(theta.shape[0])

    def _g(self, theta):
        if self._grad_fn is None:
            return _fd_grad(self._f, theta)
        return np.asarray(self._grad_fn(theta), dtype=float).reshape(theta.shape)

    def _h(self, theta):
        if self._hess_fn is not None:
            return np.asarray(self._hess_fn(theta), dtype=float).reshape(theta.shape[0], self.d, self.d)
        if self._grad_fn is not None:
            return _fd_hess_from_grad(self._g, theta)
        return _fd_hess_from_psi(self._f, theta)

    def __repr__(self):
        return f"TargetDensity(name={self.name!r}, d={self.d})"


@dataclass(frozen=True)
class Site:
    """One factor ``f_i = exp(-φ_i)``; ``weight`` scales all three evaluators."""

    phi: BatchFn
    grad: BatchFn
    hess: BatchFn
    weight: float = 1.0
    label: str = ""

    def scaled(self, factor: float) -> "Site":
        return Site(self.phi, self.grad, self.hess, self.weight * factor, self.label)


class FactorizedTarget(_Energy):
    """Target split into additive site energies, ``ψ = Σ_i φ_i``."""

    def __init__(self, d: int, sites: Sequence[Site], convex: bool = False,
                 combined: TargetDensity | None = None, name: str = "factorized"):
        if not sites:
            raise ValueError("a factorized target needs at least one site")
        self.d = int(d)
        self.sites = tuple(sites)
        self.convex = bool(convex)
        self.name = name
        self._combined = combined

    @property
    def n(self) -> int:
        return len(self.sites)

    def phi(self, i: int, theta) -> np.ndarray:
        t, single = _batch(theta, self.d)
        s = self.sites[i]
        v = s.weight * np.asarray(s.phi(t), dtype=float).reshape(t.shape[0])
        return float(v[0]) if single else v

    def grad_phi(self, i: int, theta) -> np.ndarray:
        t, single = _batch(theta, self.d)
        s = self.sites[i]
        v = s.weight * np.asarray(s.grad(t), dtype=float).reshape(t.shape)
        return v[0] if single else v

    def hess_phi(self, i: int, theta) -> np.ndarray:
        t, single = _batch(theta, self.d)
        s = self.sites[i]
        v = s.weight * np.asarray(s.hess(t), dtype=float).reshape(t.shape[0], self.d, self.d)
        return v[0] if single else v

    def _f(self, theta):
        if self._combined is not None:
            return self._combined._f(theta)
        return sum(self.phi(i, theta) for i in range(self.n))

    def _g(self, theta):
        if self._combined is not None:
            return self._combined._g(theta)
        return sum(self.grad_phi(i, theta) for i in range(self.n))

    def _h(self, theta):
        if self._combined is not None:
            return self._combined._h(theta)
        return sum(self.hess_phi(i, theta) for i in range(self.n))

    @property
    def reference_moments(self):
        return None if self._combined is None else self._combined.reference_moments

    @property
    def log_z(self):
        return None if self._combined is None else self._combined.log_z

    def combined(self) -> TargetDensity:
        """The whole target ``exp(-Σφ_i)`` as a :class:`TargetDensity`."""
        if self._combined is not None:
            return self._combined
        return TargetDensity(self.d, self._f, self._g, self._h, convex=self.convex, name=self.name)

    def __repr__(self):
        return f"FactorizedTarget(name={self.name!r}, d={self.d}, n={self.n})"


def as_density(target) -> TargetDensity:
    return target.combined() if isinstance(target, FactorizedTarget) else target


# ---------------------------------------------------------------- built-ins

def make_gaussian_target(mu, sigma) -> TargetDensity:
    """Exact Gaussian target; ψ is the full negative log density, so ``log_z = 0``."""
    ref = GaussianMoment(mu, sigma)
    P = spd_inverse(ref.sigma)
    m = ref.mu
    const = 0.5 * ref.log_det_sigma() + 0.5 * ref.d * math.log(2 * math.pi)

    def psi(t):
        z = t - m
        return 0.5 * np.einsum("ni,ij,nj->n", z, P, z) + const

    def grad(t):
        return (t - m) @ P

    def hess(t):
        return np.broadcast_to(P, (t.shape[0],) + P.shape).copy()

    return TargetDensity(ref.d, psi, grad, hess, convex=True, reference_moments=ref, log_z=0.0, name="gaussian")


def factorize(target: TargetDensity, n: int = 1) -> FactorizedTarget:
    """Split a target into ``n`` identical sites ``ψ/n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    site = Site(target._f, target._g, target._h, weight=1.0 / n, label=target.name)
    return FactorizedTarget(target.d, [site] * n, convex=target.convex, combined=target, name=target.name)


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    bad = ~np.isin(y, (-1.0, 1.0))
    if bad.any():
        raise BadLabel(f"labels must be -1 or +1; bad value {y[bad][0]!r} at index {int(np.argmax(bad))}")
    return y


def _glm_target(X, y, prior_precision, prior_site, name, link_f, link_g, link_h) -> FactorizedTarget:
    """Shared builder for GLM-style sites ``φ_i(θ) = ℓ(y_i x_iᵀθ) + prior``.

    ``link_f/g/h`` give ℓ and its first two derivatives in the margin ``m``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = _check_labels(y)
    n, d = X.shape
    if n < 1:
        raise ValueError("need at least one data row")
    if y.size != n:
        raise DimensionMismatch(f"{y.size} labels for {n} rows")
    prior_precision = float(prior_precision)
    if prior_precision < 0:
        raise ValueError("prior_precision must be >= 0")
    lam = 0.0 if prior_site else prior_precision / n
    eye = np.eye(d)

    def make_site(xi, yi):
        def phi(t):
            return link_f(yi * (t @ xi)) + 0.5 * lam * np.sum(t * t, axis=1)

        def grad(t):
            return (yi * link_g(yi * (t @ xi)))[:, None] * xi + lam * t

        def hess(t):
            c = link_h(yi * (t @ xi))
            return c[:, None, None] * np.outer(xi, xi) + lam * eye

        return Site(phi, grad, hess, label=f"{name}[{len(sites)}]")

    sites = []
    for xi, yi in zip(X, y):
        sites.append(make_site(xi.copy(), float(yi)))
    if prior_site and prior_precision > 0:
        sites.append(Site(lambda t: 0.5 * prior_precision * np.sum(t * t, axis=1),
                          lambda t: prior_precision * t,
                          lambda t: np.broadcast_to(prior_precision * eye, (t.shape[0], d, d)).copy(),
                          label="prior"))

    Xy = X * y[:, None]

    def psi(t):
        return np.sum(link_f(t @ Xy.T), axis=1) + 0.5 * prior_precision * np.sum(t * t, axis=1)

    def grad(t):
        return link_g(t @ Xy.T) @ Xy + prior_precision * t

    def hess(t):
        c = link_h(t @ Xy.T)
        return np.einsum("nk,ki,kj->nij", c, Xy, Xy) + prior_precision * eye

    combined = TargetDensity(d, psi, grad, hess, convex=True, name=name)
    return FactorizedTarget(d, sites, convex=True, combined=combined, name=name)


def _softplus_neg(m):
    return np.logaddexp(0.0, -m)


def _softplus_neg_d1(m):
    return -expit(-m)


def _softplus_neg_d2(m):
    return expit(m) * expit(-m)


def make_logistic_regression_target(X, y, prior_precision: float = 1.0, prior_site: bool = False) -> FactorizedTarget:
    """Logistic-regression posterior with sites ``log(1+exp(-y_i x_iᵀθ)) + λ‖θ‖²/(2n)``.

    With ``prior_site=True`` the Gaussian prior becomes its own exact extra site
    instead of being spread over the likelihood sites.
    """
    return _glm_target(X, y, prior_precision, prior_site, "logistic",
                       _softplus_neg, _softplus_neg_d1, _softplus_neg_d2)


def _probit_f(m):
    return -log_ndtr(m)


def _probit_ratio(m):
    # φ(m)/Φ(m), stable for large negative m
    return np.exp(-0.5 * m * m - 0.5 * math.log(2 * math.pi) - log_ndtr(m))


def _probit_d1(m):
    return -_probit_ratio(m)


def _probit_d2(m):
    lam = _probit_ratio(m)
    return lam * (lam + m)


def make_probit_target(X, y, prior_precision: float = 1.0, prior_site: bool = False) -> FactorizedTarget:
    """Probit-regression posterior with sites ``-log Φ(y_i x_iᵀθ) + λ‖θ‖²/(2n)``."""
    return _glm_target(X, y, prior_precision, prior_site, "probit", _probit_f, _probit_d1, _probit_d2)


def make_skewed_target(slopes=(2.0, -1.0, 3.0), offsets=(0.5, 1.0, -2.0)) -> FactorizedTarget:
    """1-d convex target ``ψ(θ) = θ²/2 + Σ_k softplus(a_k θ + b_k)``.

    Site ``k`` carries ``softplus(a_k θ + b_k) + θ²/(2K)``.
    """
    a = np.asarray(slopes, dtype=float)
    b = np.asarray(offsets, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("slopes and offsets must be non-empty and the same length")
    K = a.size
    sites = []
    for ak, bk in zip(a, b):
        def phi(t, ak=ak, bk=bk):
            return np.logaddexp(0.0, ak * t[:, 0] + bk) + 0.5 * t[:, 0] ** 2 / K

        def grad(t, ak=ak, bk=bk):
            return (ak * expit(ak * t[:, 0] + bk) + t[:, 0] / K)[:, None]

        def hess(t, ak=ak, bk=bk):
            s = expit(ak * t[:, 0] + bk)
            return (ak * ak * s * (1 - s) + 1.0 / K)[:, None, None]

        sites.append(Site(phi, grad, hess, label="skewed"))

    def psi(t):
        return 0.5 * t[:, 0] ** 2 + np.sum(np.logaddexp(0.0, np.outer(t[:, 0], a) + b), axis=1)

    def cgrad(t):
        return (t[:, 0] + expit(np.outer(t[:, 0], a) + b) @ a)[:, None]

    def chess(t):
        s = expit(np.outer(t[:, 0], a) + b)
        return (1.0 + (s * (1 - s)) @ (a * a))[:, None, None]

    combined = TargetDensity(1, psi, cgrad, chess, convex=True, name="skewed")
    return FactorizedTarget(1, sites, convex=True, combined=combined, name="skewed")


def make_grid_target(grid, psi_values, convex: bool = False) -> TargetDensity:
    """1-d target tabulated on a grid and interpolated by a cubic spline.

    Outside the grid ψ continues as the second-order Taylor expansion at the
    nearest endpoint, with curvature floored at a small positive value so that
    the density stays integrable.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    vals = np.asarray(psi_values, dtype=float).reshape(-1)
    if grid.size != vals.size or grid.size < 4:
        raise ValueError("grid and psi values need the same length (>= 4)")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    spl = CubicSpline(grid, vals)
    d1, d2 = spl.derivative(1), spl.derivative(2)
    lo, hi = grid[0], grid[-1]
    ends = [(lo, float(spl(lo)), float(d1(lo)), max(float(d2(lo)), 1e-3)),
            (hi, float(spl(hi)), float(d1(hi)), max(float(d2(hi)), 1e-3))]

    def _eval(t, order):
        x = t[:, 0]
        inside = (x >= lo) & (x <= hi)
        out = np.empty_like(x)
        out[inside] = (spl, d1, d2)[order](x[inside])
        for (e, f0, g0, h0), mask in ((ends[0], x < lo), (ends[1], x > hi)):
            dx = x[mask] - e
            out[mask] = (f0 + g0 * dx + 0.5 * h0 * dx * dx, g0 + h0 * dx, np.full(dx.shape, h0))[order]
        return out

    return TargetDensity(1, lambda t: _eval(t, 0), lambda t: _eval(t, 1)[:, None],
                         lambda t: _eval(t, 2)[:, None, None], convex=convex, name="custom-grid")


def temper(target: FactorizedTarget, k: int) -> FactorizedTarget:
    """Replace every site ``φ_i`` by ``k`` consecutive copies of ``φ_i/k``."""
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return target
    sites = [s.scaled(1.0 / k) for s in target.sites for _ in range(k)]
    return FactorizedTarget(target.d, sites, convex=target.convex, combined=target._combined,
                            name=f"{target.name}^{k}")


def demo_logistic_data(n: int = 8, d: int = 1, seed: int = 0, theta_true=None):
    """Synthetic logistic-regression data used by the built-in experiments."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    if theta_true is None:
        theta_true = np.linspace(1.0, -0.5, d) if d > 1 else np.array([1.0])
    p = expit(X @ np.asarray(theta_true, dtype=float))
    y = np.where(rng.uniform(size=n) < p, 1.0, -1.0)
    return X, y


def builtin_targets(d: int = 1) -> dict:
    """Name → target for the stock models exercised by the test battery."""
    X, y = demo_logistic_data(8, d, seed=0)
    out = {
        "gaussian": make_gaussian_target(np.linspace(0.5, -0.5, d), np.eye(d) * 0.8 + 0.1),
        "logistic": make_logistic_regression_target(X, y, 1.0),
        "probit": make_probit_target(X, y, 1.0),
    }
    if d == 1:
        out["skewed"] = make_skewed_target()
    return out
