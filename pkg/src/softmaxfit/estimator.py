"""Maximum-likelihood and MAP estimation for the softmax choice model."""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats
from scipy.optimize import linprog

from .model import as_theta, evaluate, log_likelihood, log_likelihood_gradient
from .optimize import maximize
from .special import norm_ppf

__all__ = [
    "ConfidenceInterval",
    "FitResult",
    "IdentificationReport",
    "check_identification",
    "confidence_intervals",
    "covariance_from_hessian",
    "fit_map",
    "fit_ml",
    "recession_direction",
    "pool_fits",
    "welch_t_test",
]


@dataclass(frozen=True)
class FitResult:
    """Outcome of an ML or MAP fit.

    ``covariance`` is the asymptotic covariance ``(-H)^{-1}`` at the optimum,
    or ``None`` when the Hessian there is not negative definite.
    """

    theta_hat: np.ndarray
    covariance: Optional[np.ndarray]
    log_likelihood: float
    converged: bool
    iterations: int
    gradient_norm: float
    n_obs: int = 0
    message: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def standard_errors(self):
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self):
        """JSON-ready mapping with the fixed CLI field names."""
        return {
            "theta_hat": [float(v) for v in self.theta_hat],
            "covariance": None if self.covariance is None
            else [float(v) for v in np.asarray(self.covariance).ravel()],
            "log_likelihood": float(self.log_likelihood),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.gradient_norm),
        }

    @classmethod
    def from_dict(cls, d):
        theta = np.asarray(d["theta_hat"], dtype=float)
        cov = d.get("covariance")
        if cov is not None:
            cov = np.asarray(cov, dtype=float).reshape(theta.size, theta.size)
        return cls(theta, cov, float(d["log_likelihood"]), bool(d["converged"]),
                   int(d["iterations"]), float(d["gradient_norm"]))


@dataclass(frozen=True)
class IdentificationReport:
    second_moment: np.ndarray
    min_eigenvalue: float
    identified: bool
    n_lower_bound: int
    meets_sample_bound: bool
    threshold: float


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: np.ndarray
    upper: np.ndarray
    level: float

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, theta):
        theta = np.asarray(theta, dtype=float)
        return (self.lower <= theta) & (theta <= self.upper)


def check_identification(data, threshold=None):
    """Second-moment test for identification.

    Each observation contributes ``X X^T`` where ``X`` holds the feature rows
    of all options but the last (which is zeroed).  The data are reported as
    identified when the smallest eigenvalue of the average exceeds
    ``threshold``, by default ``1e-8 * trace / n_obj``.
    """
    x = data.features[:, :-1, :].reshape(-1, data.n_obj)
    moment = (x.T @ x) / data.n
    moment = 0.5 * (moment + moment.T)
    min_eig = float(np.linalg.eigvalsh(moment)[0])
    if threshold is None:
        threshold = 1e-8 * float(np.trace(moment)) / data.n_obj
    bound = math.ceil(data.n_obj / data.m)
    identified = bool(min_eig > threshold) and np.trace(moment) > 0
    return IdentificationReport(moment, min_eig, bool(identified), bound,
                                data.n >= bound, float(threshold))


def _spd_inverse(a):
    a = 0.5 * (a + a.T)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
    inv_l = np.linalg.solve(chol, np.eye(a.shape[0]))
    out = inv_l.T @ inv_l
    if not np.all(np.isfinite(out)):
        return None
    return 0.5 * (out + out.T)


def covariance_from_hessian(hessian):
    """``(-H)^{-1}`` via Cholesky, or ``None`` if ``-H`` is not positive definite."""
    return _spd_inverse(-np.asarray(hessian, dtype=float))


def _fit(data, objective, gradient, hessian, init, method, tol, max_iter):
    theta0 = np.zeros(data.n_obj) if init is None else as_theta(init, data.n_obj)
    res = maximize(objective, theta0, gradient, hess=hessian, method=method,
                   tol=tol, max_iter=max_iter)
    h = hessian(res.x)
    cov = covariance_from_hessian(h)
    diagnostics = {"history": res.history}
    if cov is None:
        diagnostics["covariance"] = "unavailable: Hessian not negative definite"
    return FitResult(
        theta_hat=res.x,
        covariance=cov,
        log_likelihood=log_likelihood(data, res.x),
        converged=res.converged,
        iterations=res.iterations,
        gradient_norm=float(np.max(np.abs(res.gradient))),
        n_obs=data.n,
        message=res.message,
        diagnostics=diagnostics,
    )


def recession_direction(data, tol=1e-6):
    """Direction along which the log-likelihood increases without bound.

    Returns a unit vector ``d`` with ``(x_chosen - x_i) @ d >= 0`` for every
    observation and option and at least one strict inequality, or ``None``
    when no such direction exists.  With identified data, ``None`` means a
    finite maximizer exists.  Found by a linear program on column-scaled
    feature differences.
    """
    x = data.features
    rows = np.arange(data.n)
    diff = x[rows, data.chosen][:, None, :] - x
    keep = np.ones(x.shape[:2], dtype=bool)
    keep[rows, data.chosen] = False
    diff = diff[keep]
    scale = np.abs(diff).max(axis=0) if diff.size else np.ones(data.n_obj)
    scale[scale == 0] = 1.0
    diff = diff / scale
    diff = diff[np.abs(diff).max(axis=1) > 0]
    if diff.size == 0:
        return None
    res = linprog(-diff.sum(axis=0), A_ub=-diff, b_ub=np.zeros(diff.shape[0]),
                  bounds=[(-1.0, 1.0)] * data.n_obj, method="highs")
    if res.status != 0 or not (diff @ res.x).max() > tol:
        return None
    d = res.x / scale
    return d / np.linalg.norm(d)


def fit_ml(data, init=None, method="bfgs", tol=1e-8, max_iter=500):
    """Maximum-likelihood estimate of ``theta``.

    Parameters
    ----------
    data : ChoiceDataset
    init : array_like, optional
        Starting point, zero by default.
    method : {"bfgs", "newton"}
    tol : float
        Convergence threshold on the infinity norm of the gradient.
    max_iter : int

    Returns
    -------
    FitResult
        When the choices are separable (see :func:`recession_direction`)
        there is no finite maximizer; the last iterate is returned with
        ``converged=False`` and the direction in ``diagnostics``.
    """
    fit = _fit(
        data,
        lambda t: log_likelihood(data, t),
        lambda t: log_likelihood_gradient(data, t),
        lambda t: evaluate(data, t)[2],
        init, method, tol, max_iter,
    )
    direction = recession_direction(data)
    if direction is None:
        return fit
    diagnostics = dict(fit.diagnostics, recession_direction=direction.tolist())
    return replace(fit, converged=False, diagnostics=diagnostics,
                   message="no finite maximizer: choices are separable")


def fit_map(data, prior, init=None, method="bfgs", tol=1e-8, max_iter=500):
    """Maximum a posteriori estimate under ``prior``.

    The reported covariance is the inverse negative Hessian of the log
    posterior; ``log_likelihood`` is the data term alone.
    """
    theta0 = np.zeros(data.n_obj) if init is None else as_theta(init, data.n_obj)
    if not np.isfinite(prior.log_density(theta0)):
        raise ValueError("prior density is not finite at the initial point")
    return _fit(
        data,
        lambda t: log_likelihood(data, t) + prior.log_density(t),
        lambda t: log_likelihood_gradient(data, t) + prior.log_density_gradient(t),
        lambda t: evaluate(data, t)[2] + prior.hessian(t),
        theta0, method, tol, max_iter,
    )


def confidence_intervals(fit, level=0.95):
    """Per-coordinate Wald intervals ``theta_hat +/- z * se``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if fit.covariance is None:
        raise ValueError("covariance unavailable for this fit")
    z = norm_ppf(0.5 * (1.0 + level))
    half = z * fit.standard_errors
    return ConfidenceInterval(fit.theta_hat - half, fit.theta_hat + half, level)


def pool_fits(fits):
    """Inverse-variance (fixed-effects) pooling of independent fits.

    Fits whose covariance is missing or singular are left out and listed in
    ``diagnostics["excluded"]``.
    """
    if not fits:
        raise ValueError("no fits to pool")
    k = fits[0].theta_hat.size
    precision_sum = np.zeros((k, k))
    weighted = np.zeros(k)
    included, excluded = [], []
    for idx, fit in enumerate(fits):
        if fit.theta_hat.size != k:
            raise ValueError("fits have different parameter dimensions")
        prec = None if fit.covariance is None else _spd_inverse(fit.covariance)
        if prec is None:
            excluded.append(idx)
            continue
        precision_sum += prec
        weighted += prec @ fit.theta_hat
        included.append(idx)
    if not included:
        raise ValueError("every fit has an unusable covariance")
    cov = _spd_inverse(precision_sum)
    if cov is None:
        raise ValueError("pooled precision is singular")
    theta = cov @ weighted
    members = [fits[i] for i in included]
    return FitResult(
        theta_hat=theta,
        covariance=cov,
        log_likelihood=float(sum(f.log_likelihood for f in members)),
        converged=all(f.converged for f in members),
        iterations=int(sum(f.iterations for f in members)),
        gradient_norm=float(max(f.gradient_norm for f in members)),
        n_obs=int(sum(f.n_obs for f in members)),
        message="pooled",
        diagnostics={"included": included, "excluded": excluded},
    )


def welch_t_test(a, b):
    """Two-sided Welch test from summary statistics.

    Parameters
    ----------
    a, b : tuple
        ``(mean, variance, count)`` for each group, where ``variance`` is the
        sample variance of the group.

    Returns
    -------
    (t, df, p) : tuple of float
    """
    (ma, va, na), (mb, vb, nb) = a, b
    if na < 2 or nb < 2:
        raise ValueError("each group needs at least two members")
    if not (va > 0 and vb > 0) or not all(np.isfinite([ma, mb, va, vb])):
        raise ValueError("variances must be positive and finite")
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / (sa ** 2 / (na - 1) + sb ** 2 / (nb - 1))
    p = float(2.0 * stats.t.sf(abs(t), df))
    return float(t), float(df), min(p, 1.0)
