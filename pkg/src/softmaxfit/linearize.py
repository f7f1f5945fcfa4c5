"""First-order expansion of the UCL objective about a nominal prior.

Writing ``delta0^2 = sigma_s^2 / sigma0^2``, the scaled objective
``Q_i^t log t / nu`` is expanded in ``(d_mu, d_delta)`` around a nominal
``(mu0_bar, delta0_sq_bar)``.  The result is a softmax model with a linear
objective in ``theta = (1/nu, d_mu/nu, d_delta/nu)`` and three features per
arm and decision, which the ordinary ML estimator can fit.

With ``A = delta0_sq_bar * Lam + diag(n)``, ``Lam`` the inverse spatial
correlation and ``s`` the per-arm reward sums, the posterior is exactly
``mu = A^{-1}(delta0^2 Lam 1 mu0 + s)`` and ``Sigma = sigma_s^2 A^{-1}``;
the coefficients below are its value and derivatives at the nominal point.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .bandit import alpha_t, build_spatial_prior
from .estimator import (
    check_identification,
    confidence_intervals,
    fit_ml,
    pool_fits,
    welch_t_test,
)
from .model import ChoiceDataset
from .special import norm_isf

__all__ = [
    "LinearizationPoint",
    "LinearizedCoefficients",
    "UclEstimate",
    "UclFeatureDataset",
    "delta_bounds",
    "exact_objective",
    "fit_population",
    "fit_ucl",
    "linearization_coefficients",
    "linearize_episode",
    "linearized_objective",
    "theta_from_ucl",
    "ucl_from_theta",
]

DEFAULT_SIGMA_S_SQ = 0.01


@dataclass(frozen=True)
class LinearizationPoint:
    mu0_bar: float
    delta0_sq_bar: float
    lam: float
    sigma_s_sq: float = DEFAULT_SIGMA_S_SQ

    def __post_init__(self):
        if not self.delta0_sq_bar > 0 or not self.sigma_s_sq > 0 or self.lam < 0:
            raise ValueError("need delta0_sq_bar > 0, sigma_s_sq > 0 and lam >= 0")

    @classmethod
    def from_prior(cls, mu0_bar, sigma0_sq_bar, lam, sigma_s_sq=DEFAULT_SIGMA_S_SQ):
        """Build from a nominal prior variance instead of a relative precision."""
        return cls(float(mu0_bar), sigma_s_sq / sigma0_sq_bar, float(lam), float(sigma_s_sq))

    @property
    def sigma0_sq_bar(self):
        return self.sigma_s_sq / self.delta0_sq_bar

    def to_dict(self):
        return {
            "mu0_bar": self.mu0_bar,
            "sigma0_sq_bar": self.sigma0_sq_bar,
            "delta0_sq_bar": self.delta0_sq_bar,
            "lam": self.lam,
            "sigma_s_sq": self.sigma_s_sq,
        }


@dataclass(frozen=True)
class LinearizedCoefficients:
    """Per decision time (rows) and arm (columns) expansion coefficients.

    ``c`` and ``d`` are the diagonals of ``sigma_s^2 A^{-1}`` and
    ``sigma_s^2 A^{-1} Lam A^{-1}``; ``e``, ``f``, ``g`` are the posterior
    mean at the nominal point and its derivatives in ``mu0`` and ``delta0^2``.
    """

    times: np.ndarray
    c: np.ndarray
    d: np.ndarray
    e: np.ndarray
    f: np.ndarray
    g: np.ndarray
    point: LinearizationPoint


def _history_arrays(choices, rewards, n_arms):
    """Counts and reward sums before each decision; row ``t-1`` for time ``t``."""
    T = len(choices)
    counts = np.zeros((T, n_arms))
    sums = np.zeros((T, n_arms))
    for t in range(1, T):
        counts[t] = counts[t - 1]
        sums[t] = sums[t - 1]
        counts[t, choices[t - 1]] += 1
        sums[t, choices[t - 1]] += rewards[t - 1]
    return counts, sums


def _posterior(prec_corr, delta_sq, mu0, counts, sums):
    """Exact posterior mean and ``A^{-1}`` for one history."""
    a = delta_sq * prec_corr + np.diag(counts)
    fac = cho_factor(a, lower=True)
    a_inv = cho_solve(fac, np.eye(a.shape[0]))
    a_inv = 0.5 * (a_inv + a_inv.T)
    mean = mu0 + a_inv @ (sums - counts * mu0)
    return mean, a_inv


def linearization_coefficients(choices, rewards, locations, point):
    """Expansion coefficients for every decision of an episode.

    Parameters
    ----------
    choices : array_like of int
        Zero-based arm chosen at t = 1..T.
    rewards : array_like
        Rewards received at t = 1..T.
    locations : ndarray, shape (N, 2)
    point : LinearizationPoint

    Returns
    -------
    LinearizedCoefficients
    """
    choices = np.asarray(choices, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=float)
    n_arms = np.asarray(locations).shape[0]
    if choices.size and (choices.min() < 0 or choices.max() >= n_arms):
        raise ValueError("choice index does not match the arm count")
    corr = build_spatial_prior(locations, point.lam)
    lam_mat = np.linalg.inv(corr)
    lam_mat = 0.5 * (lam_mat + lam_mat.T)
    counts, sums = _history_arrays(choices, rewards, n_arms)
    T = choices.size
    c = np.empty((T, n_arms))
    d = np.empty((T, n_arms))
    e = np.empty((T, n_arms))
    f = np.empty((T, n_arms))
    g = np.empty((T, n_arms))
    s2 = point.sigma_s_sq
    for k in range(T):
        mean, a_inv = _posterior(lam_mat, point.delta0_sq_bar, point.mu0_bar, counts[k], sums[k])
        ab = a_inv @ lam_mat
        c[k] = s2 * np.diag(a_inv)
        d[k] = s2 * np.einsum("ij,ji->i", ab, a_inv)
        e[k] = mean
        f[k] = 1.0 - a_inv @ counts[k]
        g[k] = -ab @ (mean - point.mu0_bar)
    return LinearizedCoefficients(np.arange(1, T + 1), c, d, e, f, g, point)


def _features_from_coefficients(coef):
    t = coef.times.astype(float)
    log_t = np.log(t)[:, None]
    z = np.asarray(norm_isf(alpha_t(t)))[:, None]
    root_c = np.sqrt(coef.c)
    x1 = (coef.e + root_c * z) * log_t
    x2 = coef.f * log_t
    x3 = (coef.g - coef.d / (2.0 * root_c) * z) * log_t
    return np.stack([x1, x2, x3], axis=-1)


def delta_bounds(coeffs):
    """Interval of ``d_delta`` over which the expansion stays meaningful.

    The lower end keeps ``delta0^2`` non-negative; the upper end keeps every
    linearized standard deviation non-negative.
    """
    with np.errstate(divide="ignore"):
        ratio = np.where(coeffs.d > 0, 2.0 * coeffs.c / np.where(coeffs.d > 0, coeffs.d, 1.0), np.inf)
    upper = float(ratio.min()) if ratio.size else math.inf
    return -coeffs.point.delta0_sq_bar, upper


@dataclass(frozen=True)
class UclFeatureDataset:
    """Linearized choice data for one episode.

    ``data`` excludes t = 1, whose features are identically zero.
    """

    data: ChoiceDataset
    times: np.ndarray
    point: LinearizationPoint
    bounds: tuple
    episode_id: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def truncated(self, t_max):
        """Keep only decisions made at times ``t <= t_max``."""
        keep = self.times <= t_max
        if not np.any(keep):
            raise ValueError(f"no decisions at or before t = {t_max}")
        return UclFeatureDataset(self.data.subset(keep), self.times[keep], self.point,
                                 self.bounds, self.episode_id, dict(self.meta))

    def provenance(self):
        return {
            "schema_version": 1,
            "episode_id": self.episode_id,
            "linearization_point": self.point.to_dict(),
            "delta_bounds": [float(b) for b in self.bounds],
            "sigma_s_sq": self.point.sigma_s_sq,
            "times": [int(t) for t in self.times],
        }


def linearize_episode(log, locations, point, episode_id=None):
    """Turn an episode's choices into a 3-feature softmax dataset."""
    locations = np.asarray(locations, dtype=float)
    if log.horizon < 2:
        raise ValueError("an episode needs at least two decisions")
    coef = linearization_coefficients(log.choices, log.rewards, locations, point)
    feats = _features_from_coefficients(coef)
    data = ChoiceDataset(feats[1:], log.choices[1:])
    return UclFeatureDataset(data, coef.times[1:], point, delta_bounds(coef), episode_id)


def linearized_objective(coeffs, theta):
    """``theta @ x_i^t`` for every decision and arm."""
    return _features_from_coefficients(coeffs) @ np.asarray(theta, dtype=float)


def exact_objective(choices, rewards, locations, mu0, delta0_sq, lam, sigma_s_sq, nu):
    """Exact ``Q_i^t log t / nu`` under prior ``(mu0, sigma_s^2 / delta0^2, lam)``.

    Evaluated in closed form from the history, without any expansion.
    """
    choices = np.asarray(choices, dtype=np.int64)
    n_arms = np.asarray(locations).shape[0]
    lam_mat = np.linalg.inv(build_spatial_prior(locations, lam))
    lam_mat = 0.5 * (lam_mat + lam_mat.T)
    counts, sums = _history_arrays(choices, rewards, n_arms)
    T = choices.size
    out = np.empty((T, n_arms))
    for k in range(T):
        mean, a_inv = _posterior(lam_mat, delta0_sq, mu0, counts[k], sums[k])
        t = k + 1
        sigma = np.sqrt(sigma_s_sq * np.diag(a_inv))
        out[k] = (mean + sigma * norm_isf(alpha_t(t))) * math.log(t) / nu
    return out


def theta_from_ucl(nu, mu0, sigma0_sq, point):
    """Linear-model parameters implied by a UCL parameter set."""
    d_mu = mu0 - point.mu0_bar
    d_delta = point.sigma_s_sq / sigma0_sq - point.delta0_sq_bar
    return np.array([1.0 / nu, d_mu / nu, d_delta / nu])


def ucl_from_theta(theta, point):
    """Invert :func:`theta_from_ucl`; returns ``(nu, d_mu, d_delta)``."""
    theta = np.asarray(theta, dtype=float)
    if not theta[0] > 0:
        raise ValueError("theta_1 must be positive to map back to nu")
    return 1.0 / theta[0], theta[1] / theta[0], theta[2] / theta[0]


@dataclass(frozen=True)
class UclEstimate:
    """Estimated linear parameters and the UCL parameters they imply.

    ``transformed_covariance`` (order ``nu, mu0, sigma0_sq``) comes from the
    delta method and is an extension beyond the asymptotic theory for theta.
    """

    theta: np.ndarray
    covariance: Optional[np.ndarray]
    nu: Optional[float]
    mu0: Optional[float]
    sigma0_sq: Optional[float]
    transformed_covariance: Optional[np.ndarray]
    valid: bool
    issues: tuple
    point: LinearizationPoint
    log_likelihood: float
    fit: object = None
    bounds: tuple = (-math.inf, math.inf)

    def confidence_intervals(self, level=0.95):
        return confidence_intervals(self.fit, level)

    def to_dict(self):
        def arr(a):
            return None if a is None else [float(v) for v in np.asarray(a).ravel()]
        return {
            "theta": arr(self.theta),
            "covariance": arr(self.covariance),
            "nu": self.nu,
            "mu0": self.mu0,
            "sigma0_sq": self.sigma0_sq,
            "transformed_covariance_delta_method": arr(self.transformed_covariance),
            "valid": self.valid,
            "issues": list(self.issues),
            "linearization_point": self.point.to_dict(),
            "log_likelihood": self.log_likelihood,
            "delta_bounds": [float(b) for b in self.bounds],
            "fit": None if self.fit is None else self.fit.to_dict(),
        }


def _transform(fit, point, bounds):
    theta = fit.theta_hat
    issues = []
    if not theta[0] > 0:
        issues.append("theta_1 <= 0: nu is not positive")
        return None, None, None, None, issues
    nu, d_mu, d_delta = ucl_from_theta(theta, point)
    mu0 = point.mu0_bar + d_mu
    delta_sq = point.delta0_sq_bar + d_delta
    lower, upper = bounds
    if not lower <= d_delta <= upper:
        issues.append(f"d_delta = {d_delta:.6g} outside validity bounds [{lower:.6g}, {upper:.6g}]")
    if delta_sq <= 0:
        issues.append("implied delta0^2 <= 0: sigma0^2 undefined")
        return nu, mu0, None, None, issues
    s2 = point.sigma_s_sq
    sigma0_sq = s2 / delta_sq
    t1, t2, t3 = theta
    jac = np.array([
        [-1.0 / t1 ** 2, 0.0, 0.0],
        [-t2 / t1 ** 2, 1.0 / t1, 0.0],
        [s2 / delta_sq ** 2 * t3 / t1 ** 2, 0.0, -s2 / delta_sq ** 2 / t1],
    ])
    tcov = None if fit.covariance is None else jac @ fit.covariance @ jac.T
    return nu, mu0, sigma0_sq, tcov, issues


def fit_ucl(dataset, method="newton", tol=1e-8, max_iter=500, require_identified=True):
    """Fit the linearized model and map the estimate back to UCL parameters.

    The estimate is flagged invalid (never silently dropped) when
    ``theta_1 <= 0`` or the implied ``d_delta`` leaves :func:`delta_bounds`.
    """
    report = check_identification(dataset.data)
    if require_identified and not report.identified:
        raise ValueError("linearized dataset is not identified")
    fit = fit_ml(dataset.data, method=method, tol=tol, max_iter=max_iter)
    return _estimate_from_fit(fit, dataset.point, dataset.bounds)


def _estimate_from_fit(fit, point, bounds):
    nu, mu0, sigma0_sq, tcov, issues = _transform(fit, point, bounds)
    if not fit.converged:
        issues.append(f"fit did not converge: {fit.message}")
    if fit.covariance is None:
        issues.append("covariance unavailable")
    return UclEstimate(
        theta=fit.theta_hat,
        covariance=fit.covariance,
        nu=nu,
        mu0=mu0,
        sigma0_sq=sigma0_sq,
        transformed_covariance=tcov,
        valid=not issues,
        issues=tuple(issues),
        point=point,
        log_likelihood=fit.log_likelihood,
        fit=fit,
        bounds=tuple(float(b) for b in bounds),
    )


def fit_population(estimates, labels):
    """Pool per-episode fits by group and compare groups coordinate-wise.

    Parameters
    ----------
    estimates : sequence of UclEstimate
        Individual fits, all made about the same linearization point.
    labels : sequence
        Group label of each estimate.

    Returns
    -------
    dict
        ``"groups"`` maps each label to its pooled :class:`UclEstimate`;
        ``"tests"`` lists Welch tests for every pair of groups and every
        coordinate of theta, or the reason a test was unavailable.
    """
    if len(estimates) != len(labels):
        raise ValueError("need one label per estimate")
    groups = {}
    for est, label in zip(estimates, labels):
        groups.setdefault(label, []).append(est)
    pooled = {}
    for label, members in groups.items():
        points = {m.point for m in members}
        if len(points) != 1:
            raise ValueError(f"group {label!r} mixes linearization points")
        point = members[0].point
        fit = pool_fits([m.fit for m in members])
        bounds = (-point.delta0_sq_bar, min(m.bounds[1] for m in members))
        pooled[label] = _estimate_from_fit(fit, point, bounds)
    tests = []
    keys = list(pooled)
    for i, ka in enumerate(keys):
        for kb in keys[i + 1:]:
            pa, pb = pooled[ka], pooled[kb]
            na = len(pa.fit.diagnostics["included"])
            nb = len(pb.fit.diagnostics["included"])
            for j in range(pa.theta.size):
                entry = {"groups": [ka, kb], "coordinate": j + 1}
                if na < 2 or nb < 2:
                    entry["unavailable"] = "group with fewer than two usable fits"
                else:
                    # a pooled standard error s with k members is the
                    # standard error of a sample with variance k * s^2
                    t, df, p = welch_t_test(
                        (pa.theta[j], na * pa.covariance[j, j], na),
                        (pb.theta[j], nb * pb.covariance[j, j], nb),
                    )
                    entry.update({"t": t, "df": df, "p_value": p})
                tests.append(entry)
    return {"groups": pooled, "tests": tests}
