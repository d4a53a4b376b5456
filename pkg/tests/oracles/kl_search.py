"""Direct minimization of KL(q, p) over 1-d Gaussians q = N(mu, sigma^2).

KL(q, p) = E_q[psi] - log(sigma) + const, with E_q[psi] from a 200-point
Gauss-Hermite rule. A coarse grid over (mu, log sigma) seeds a Nelder-Mead
refinement.
"""

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import minimize

_Z, _W = hermegauss(200)
_W = _W / _W.sum()


def objective(psi, mu, log_sigma):
    s = np.exp(log_sigma)
    return float(_W @ psi(mu + s * _Z)) - log_sigma


def gvb_minimizer(psi, mu_range=(-3, 3), log_sigma_range=(-3, 1.5), n=61):
    mus = np.linspace(*mu_range, n)
    lss = np.linspace(*log_sigma_range, n)
    vals = np.array([[objective(psi, m, ls) for ls in lss] for m in mus])
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    res = minimize(lambda p: objective(psi, p[0], p[1]), [mus[i], lss[j]], method="Nelder-Mead",
                   options={"xatol": 1e-11, "fatol": 1e-15, "maxiter": 20000})
    return res.x[0], float(np.exp(res.x[1]))


def bisect_root(f, lo, hi, tol=1e-14):
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)
