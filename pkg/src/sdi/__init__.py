"""Gaussian approximations as smoothed gradient descent.

Laplace/Newton, Gaussian variational Bayes, α-hybrid iterations and
expectation propagation all share one update: a Newton-like step whose
gradient and curvature are averaged under a smoothing kernel.
"""

from .approximators import (Schedule, alpha_step, ep_update_classical, ep_update_smoothed, gvb_step, laplace,
                            newton_step, run)
from .divergence import d_alpha, d_alpha_gradients, kl_forward, kl_gradients, kl_reverse
from .engine import Engine, expect, hybrid_moments, stein_residuals
from .gaussian import GaussianMoment, GaussianNat, divide, moment_to_nat, multiply, nat_to_moment
from .targets import (FactorizedTarget, TargetDensity, builtin_targets, factorize, make_gaussian_target,
                      make_grid_target, make_logistic_regression_target, make_probit_target, make_skewed_target,
                      temper)

__version__ = "0.1.0"

__all__ = [
    "Engine", "FactorizedTarget", "GaussianMoment", "GaussianNat", "Schedule", "TargetDensity", "alpha_step",
    "builtin_targets", "d_alpha", "d_alpha_gradients", "divide", "ep_update_classical", "ep_update_smoothed",
    "expect", "factorize",
    "gvb_step", "hybrid_moments", "kl_forward", "kl_gradients", "kl_reverse", "laplace", "make_gaussian_target",
    "make_grid_target", "make_logistic_regression_target", "make_probit_target", "make_skewed_target",
    "moment_to_nat", "multiply", "nat_to_moment", "newton_step", "run", "stein_residuals", "temper",
]
