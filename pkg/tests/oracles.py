"""Independent reference implementations used only by the tests."""

import math

import mpmath as mp
import numpy as np


def fd_gradient(f, x, h=1e-5):
    """Central differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jacobian(g, x, h=1e-5):
    """Central differences of a vector function; column j is d g / d x_j."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(g(x + e)) - np.asarray(g(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def mp_norm_ppf(p, dps=40):
    """High-precision standard normal quantile."""
    with mp.workdps(dps):
        p = mp.mpf(p)
        if p < mp.mpf("0.5"):
            x0 = -mp.sqrt(-2 * mp.log(p))
            x = mp.findroot(lambda x: mp.log(mp.ncdf(x)) - mp.log(p), x0)
        else:
            q = 1 - p
            x0 = mp.sqrt(-2 * mp.log(q))
            x = -mp.findroot(lambda x: mp.log(mp.ncdf(x)) - mp.log(q), -x0)
        return float(x)


def brute_log_likelihood(features, chosen, theta):
    """Loop-based log-likelihood with plain floats."""
    total = 0.0
    for x, y in zip(features, chosen):
        u = [float(np.dot(row, theta)) for row in x]
        top = max(u)
        total += u[y] - (top + math.log(sum(math.exp(v - top) for v in u)))
    return total


def batch_belief(mu0, sigma0_sq, corr, sigma_s_sq, choices, rewards):
    """Posterior after a whole history via the t-by-t innovation form.

    ``mu = mu0 + S0 H^T (H S0 H^T + s^2 I)^{-1} (r - H mu0)`` and
    ``Lambda = diag(n) / s^2 + S0^{-1}``.
    """
    n_arms = corr.shape[0]
    s0 = sigma0_sq * corr
    t = len(choices)
    m0 = np.full(n_arms, float(mu0))
    if t == 0:
        return m0, s0, np.linalg.inv(s0)
    h = np.zeros((t, n_arms))
    h[np.arange(t), choices] = 1.0
    gram = h @ s0 @ h.T + sigma_s_sq * np.eye(t)
    mu = m0 + s0 @ h.T @ np.linalg.solve(gram, np.asarray(rewards) - h @ m0)
    counts = np.bincount(choices, minlength=n_arms)
    prec = np.diag(counts) / sigma_s_sq + np.linalg.inv(s0)
    cov = s0 - s0 @ h.T @ np.linalg.solve(gram, h @ s0)
    return mu, cov, prec


def weighted_mean_oracle(thetas, covs):
    """Inverse-variance pooling written with explicit inverses."""
    precs = [np.linalg.inv(c) for c in covs]
    cov = np.linalg.inv(sum(precs))
    return cov @ sum(p @ t for p, t in zip(precs, thetas)), cov
