import math

import numpy as np
import pytest

from oracles import grid as oracle
from sdi.approximators import ep_update_classical, ep_update_smoothed
from sdi.divergence import target_proposal
from sdi.engine import (Engine, UnnormalizedDensity, expect, gauss_hermite_expect, gaussian_expect, hybrid_moments,
                        stein_residuals)
from sdi.errors import BudgetExceeded, DimensionMismatch
from sdi.gaussian import GaussianMoment, log_pdf
from sdi.targets import builtin_targets, demo_logistic_data, make_logistic_regression_target
from sdi.verify import random_site_state

STD = GaussianMoment.standard(1)

# Hybrid of one logistic factor exp(-log(1+e^{-θ})) with a N(0,1) cavity. Reference
# moments from a 10^6-point trapezoid grid on [-20, 20], frozen here.
LOGISTIC_HYBRID_MEAN = 0.41324192828
LOGISTIC_HYBRID_VAR = 0.82923110871


def logistic_hybrid():
    return UnnormalizedDensity(1, lambda t: -np.logaddexp(0.0, -t[:, 0]) - 0.5 * t[:, 0] ** 2, STD)


def test_gh_quadratic_exact_at_order_two():
    assert gauss_hermite_expect(STD, lambda t: t[:, 0] ** 2, 2) == pytest.approx(1.0, abs=1e-15)


def test_gh_mean_any_order():
    q = GaussianMoment([1.7], [[0.3]])
    for order in (1, 2, 5):
        assert gauss_hermite_expect(q, lambda t: t[:, 0], order) == pytest.approx(1.7, abs=1e-14)


def test_gh_fourth_moment():
    assert gauss_hermite_expect(STD, lambda t: t[:, 0] ** 4, 3) == pytest.approx(3.0, abs=1e-12)
    x, w = oracle.grid(-12, 12, 200_001)
    ref = np.sum(w * x ** 4 * np.exp(-0.5 * x * x)) / math.sqrt(2 * math.pi)
    assert ref == pytest.approx(3.0, abs=1e-10)


def test_gh_multivariate_covariance():
    sigma = np.array([[1.0, 0.3, 0.0], [0.3, 0.5, 0.1], [0.0, 0.1, 2.0]])
    q = GaussianMoment([0.1, 0.2, 0.3], sigma)
    m2 = gauss_hermite_expect(q, lambda t: np.einsum("ni,nj->nij", t, t), 3)
    np.testing.assert_allclose(m2, sigma + np.outer(q.mu, q.mu), atol=1e-13)


def test_gh_budget():
    with pytest.raises(BudgetExceeded):
        gauss_hermite_expect(GaussianMoment.standard(4), lambda t: t[:, 0], 64, node_cap=10_000)


@pytest.mark.parametrize("mode", ["grid1d", "gh_importance", "monte_carlo"])
def test_hybrid_moments_exact_gaussian(mode):
    h = UnnormalizedDensity(1, lambda t: log_pdf(STD, t), STD.scaled(2.0))
    ms = hybrid_moments(h, lambda t: t, Engine(mode=mode))
    tol = 1e-9 if mode != "monte_carlo" else 1e-2
    assert ms.mu_h[0] == pytest.approx(0.0, abs=tol)
    assert ms.cov_h[0, 0] == pytest.approx(1.0, abs=tol)
    assert ms.e_grad[0] == pytest.approx(0.0, abs=tol)
    assert ms.e_h[0, 0] == pytest.approx(1.0, abs=tol)
    assert ms.log_z == pytest.approx(0.0, abs=tol)


def test_geometric_mixture_of_gaussians():
    a, b = STD, GaussianMoment([1.0], [[1.0]])
    h = UnnormalizedDensity(1, lambda t: 0.5 * log_pdf(a, t) + 0.5 * log_pdf(b, t), a.scaled(2.0))
    ms = hybrid_moments(h, lambda t: t, Engine())
    assert ms.mu_h[0] == pytest.approx(0.5, abs=1e-9)
    assert ms.cov_h[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_logistic_hybrid_matches_dense_grid():
    ms = hybrid_moments(logistic_hybrid(), lambda t: -1.0 / (1.0 + np.exp(t)), Engine())
    assert ms.mu_h[0] == pytest.approx(LOGISTIC_HYBRID_MEAN, abs=1e-8)
    assert ms.cov_h[0, 0] == pytest.approx(LOGISTIC_HYBRID_VAR, abs=1e-8)
    assert ms.err_est < 1e-9


def test_frozen_grid_reference():
    log_z, mean, var = oracle.moments(lambda x: -oracle.softplus(-x) - 0.5 * x * x)
    assert mean == pytest.approx(LOGISTIC_HYBRID_MEAN, abs=1e-10)
    assert var == pytest.approx(LOGISTIC_HYBRID_VAR, abs=1e-10)


def test_gh_and_grid_modes_agree_in_1d():
    g = lambda t: -1.0 / (1.0 + np.exp(t))
    a = hybrid_moments(logistic_hybrid(), g, Engine(mode="grid1d"))
    b = hybrid_moments(logistic_hybrid(), g, Engine(mode="gh_importance"))
    assert abs(a.mu_h[0] - b.mu_h[0]) < 1e-8
    assert abs(a.e_h[0, 0] - b.e_h[0, 0]) < 1e-8


def test_stein_residuals_gaussian_any_v():
    h = UnnormalizedDensity(1, lambda t: log_pdf(STD, t), STD)
    for v in ([0.0], [5.0]):
        first, second = stein_residuals(h, lambda t: t, v)
        assert abs(first[0]) < 1e-9 and abs(second[0, 0]) < 1e-9


def test_stein_residuals_logistic_hybrid():
    full = lambda t: -1.0 / (1.0 + np.exp(t)) + t
    first, second, err = stein_residuals(logistic_hybrid(), full, [LOGISTIC_HYBRID_MEAN], return_err=True)
    assert np.linalg.norm(first) < 1e-6 and np.linalg.norm(second) < 1e-6
    assert max(np.abs(first).max(), np.abs(second).max()) <= 10 * err


@pytest.mark.parametrize("d", [1, 2, 3])
def test_stein_residuals_builtin_targets(d):
    for name, t in builtin_targets(d).items():
        h = UnnormalizedDensity(d, lambda th, t=t: -t._f(th), target_proposal(t).scaled(2.0))
        first, second, err = stein_residuals(h, t._g, np.zeros(d), return_err=True)
        assert max(np.abs(first).max(), np.abs(second).max()) < 1e-6, name


def test_quadratic_site_eh_is_exact_hessian():
    # a quadratic site under a non-Gaussian hybrid: EH equals its constant Hessian
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    logh = lambda t: -0.5 * np.einsum("ni,ij,nj->n", t, A, t) - np.logaddexp(0.0, t[:, 0] - t[:, 1])
    h = UnnormalizedDensity(2, logh, GaussianMoment([0.0, 0.0], np.linalg.inv(A)).scaled(2.0))
    ms = hybrid_moments(h, lambda t: t @ A, Engine())
    np.testing.assert_allclose(ms.e_h, A, atol=1e-9)


def test_eh_tends_to_expected_hessian_with_curvature():
    gaps = []
    for c in (1.0, 10.0, 100.0):
        logh = lambda t, c=c: -0.5 * c * t[:, 0] ** 2 - np.logaddexp(0.0, -3 * t[:, 0]) - 0.1 * t[:, 0] ** 4
        h = UnnormalizedDensity(1, logh, GaussianMoment([0.0], [[2.0 / c]]))
        grad = lambda t: (-3.0 / (1.0 + np.exp(3 * t[:, 0])) + 0.4 * t[:, 0] ** 3)[:, None]
        s = lambda t: 1.0 / (1.0 + np.exp(-3 * t[:, 0]))
        hess = lambda t: (9 * s(t) * (1 - s(t)) + 1.2 * t[:, 0] ** 2)[:, None, None]
        ms = hybrid_moments(h, grad, Engine(), phi_hess=hess)
        gaps.append(abs(ms.e_h[0, 0] - ms.e_hess[0, 0]) / abs(ms.e_hess[0, 0]))
    assert gaps[0] > gaps[1] > gaps[2]


def test_doubling_resolution_within_err_est():
    g = lambda t: -1.0 / (1.0 + np.exp(t))
    for name, t in builtin_targets(1).items():
        h = UnnormalizedDensity(1, lambda th, t=t: -t._f(th), target_proposal(t).scaled(2.0))
        a = hybrid_moments(h, g, Engine(nodes=4097))
        b = hybrid_moments(h, g, Engine(nodes=8193))
        assert abs(a.mu_h[0] - b.mu_h[0]) <= a.err_est, name


def test_monte_carlo_reproducible():
    X, y = demo_logistic_data(8, 5, seed=0)
    t = make_logistic_regression_target(X, y)
    q = GaussianMoment.standard(5)
    e = Engine(mode="monte_carlo", mc_seed=7, mc_draws=4096)
    a, _ = gaussian_expect(q, {"g": t._g}, e)
    b, _ = gaussian_expect(q, {"g": t._g}, e)
    np.testing.assert_array_equal(a["g"], b["g"])
    assert Engine().resolve(5) == "monte_carlo"


def test_expect_passes_log_density():
    h = UnnormalizedDensity(1, lambda t: -0.5 * t[:, 0] ** 2, STD)
    vals, err, log_z = expect(h, {"lh": lambda t, lh: lh})
    assert log_z == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-10)
    assert vals["lh"] == pytest.approx(-0.5, abs=1e-10)


def test_engine_validation():
    with pytest.raises(ValueError):
        Engine(mode="simpson")
    with pytest.raises(DimensionMismatch):
        Engine(mode="grid1d").resolve(2)


def test_hybrid_err_est_covers_update_paths():
    t = builtin_targets(2)["logistic"]
    sites = random_site_state(t, np.random.default_rng(0))
    a, ma = ep_update_classical(3, sites, t, return_summary=True)
    b, mb = ep_update_smoothed(3, sites, t, return_summary=True)
    assert np.abs(a.flat() - b.flat()).max() <= 10 * (ma.err_est + mb.err_est)
