"""Multivariate Gaussians in natural ``(r, B)`` and moment ``(mu, sigma, S)`` form.

The natural form stores the log-density as ``-0.5 θᵀBθ + rᵀθ + const``;
products and quotients of Gaussians add and subtract these coefficients.
A value with ``role="site"`` is an EP factor approximation and may carry an
indefinite ``B``; ``role="density"`` requires ``B`` positive definite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite

ROLES = ("density", "site")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def cholesky_lower(m: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor; raises NotPositiveDefinite on a bad pivot."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix is not positive definite: {exc}") from None


def spd_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via its Cholesky factor."""
    L = cholesky_lower(m)
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return symmetrize(Linv.T @ Linv)


def is_pd(m: np.ndarray) -> bool:
    try:
        cholesky_lower(symmetrize(m))
    except NotPositiveDefinite:
        return False
    return True


@dataclass(frozen=True, eq=False)
class GaussianNat:
    r: np.ndarray
    B: np.ndarray
    role: str = "site"

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.r, dtype=float)).reshape(-1)
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.shape != (r.size, r.size):
            raise DimensionMismatch(f"B has shape {B.shape}, expected {(r.size, r.size)}")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        B = symmetrize(B)
        if self.role == "density":
            cholesky_lower(B)
        object.__setattr__(self, "r", _frozen(r))
        object.__setattr__(self, "B", _frozen(B))

    @property
    def d(self) -> int:
        return self.r.size

    @property
    def indefinite(self) -> bool:
        """True when ``B`` is not positive definite (allowed for sites only)."""
        return not is_pd(self.B)

    @classmethod
    def zero(cls, d: int) -> "GaussianNat":
        return cls(np.zeros(d), np.zeros((d, d)), role="site")

    def as_density(self) -> "GaussianNat":
        return GaussianNat(self.r, self.B, role="density")

    def as_site(self) -> "GaussianNat":
        return GaussianNat(self.r, self.B, role="site")

    def flat(self) -> np.ndarray:
        """Concatenated ``(r, B)`` used for distances and convergence checks."""
        return np.concatenate([self.r, self.B.ravel()])

    def to_dict(self) -> dict:
        return {"r": self.r.tolist(), "B": self.B.tolist()}

    @classmethod
    def from_dict(cls, data: dict, role: str = "site") -> "GaussianNat":
        return cls(np.asarray(data["r"], dtype=float), np.asarray(data["B"], dtype=float), role=role)


@dataclass(frozen=True, eq=False)
class GaussianMoment:
    mu: np.ndarray
    sigma: np.ndarray
    sqrt: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).reshape(-1)
        sigma = symmetrize(np.atleast_2d(np.asarray(self.sigma, dtype=float)))
        if sigma.shape != (mu.size, mu.size):
            raise DimensionMismatch(f"sigma has shape {sigma.shape}, expected {(mu.size, mu.size)}")
        S = cholesky_lower(sigma)
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "sigma", _frozen(sigma))
        object.__setattr__(self, "sqrt", _frozen(S))

    @property
    def d(self) -> int:
        return self.mu.size

    @classmethod
    def from_sqrt(cls, mu, S) -> "GaussianMoment":
        """Build from a mean and any square root ``S`` with ``S Sᵀ = sigma``."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return cls(mu, S @ S.T)

    @classmethod
    def standard(cls, d: int) -> "GaussianMoment":
        return cls(np.zeros(d), np.eye(d))

    def scaled(self, factor: float) -> "GaussianMoment":
        """Same mean, covariance multiplied by ``factor``."""
        return GaussianMoment(self.mu, factor * self.sigma)

    @property
    def precision(self) -> np.ndarray:
        Sinv = solve_triangular(self.sqrt, np.eye(self.d), lower=True)
        return symmetrize(Sinv.T @ Sinv)

    def log_det_sigma(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.sqrt))))

    def whiten(self, theta: np.ndarray) -> np.ndarray:
        """Map points (N, d) to ``S⁻¹(θ − μ)``."""
        theta = np.atleast_2d(theta)
        return solve_triangular(self.sqrt, (theta - self.mu).T, lower=True).T

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMoment":
        return cls(np.asarray(data["mu"], dtype=float), np.asarray(data["sigma"], dtype=float))


def nat_to_moment(q: GaussianNat) -> GaussianMoment:
    L = cholesky_lower(q.B)
    Linv = solve_triangular(L, np.eye(q.d), lower=True)
    sigma = symmetrize(Linv.T @ Linv)
    mu = Linv.T @ (Linv @ q.r)
    return GaussianMoment(mu, sigma)


def moment_to_nat(q: GaussianMoment) -> GaussianNat:
    B = q.precision
    return GaussianNat(B @ q.mu, B, role="density")


def _check_dims(a: GaussianNat, b: GaussianNat) -> None:
    if a.d != b.d:
        raise DimensionMismatch(f"dimension {a.d} vs {b.d}")


def multiply(a: GaussianNat, b: GaussianNat) -> GaussianNat:
    _check_dims(a, b)
    return GaussianNat(a.r + b.r, a.B + b.B, role="site")


def divide(a: GaussianNat, b: GaussianNat) -> GaussianNat:
    _check_dims(a, b)
    return GaussianNat(a.r - b.r, a.B - b.B, role="site")


def log_pdf(q: GaussianMoment, theta) -> np.ndarray | float:
    """Exact Gaussian log density. Accepts a single point (d,) or a batch (N, d)."""
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim <= 1
    pts = theta.reshape(1, -1) if single else theta
    if pts.shape[1] != q.d:
        raise DimensionMismatch(f"theta has dimension {pts.shape[1]}, expected {q.d}")
    z = q.whiten(pts)
    out = -0.5 * np.sum(z * z, axis=1) - 0.5 * q.log_det_sigma() - 0.5 * q.d * math.log(2 * math.pi)
    return float(out[0]) if single else out


def nat_log_density(q: GaussianNat, theta: np.ndarray) -> np.ndarray:
    """Unnormalized log density ``-0.5 θᵀBθ + rᵀθ`` on a batch (N, d)."""
    theta = np.atleast_2d(theta)
    return -0.5 * np.einsum("ni,ij,nj->n", theta, q.B, theta) + theta @ q.r


def nat_distance(a: GaussianNat, b: GaussianNat) -> float:
    """Euclidean distance between concatenated natural parameters."""
    _check_dims(a, b)
    return float(np.linalg.norm(a.flat() - b.flat()))
