"""Softmax choice model with a linear objective shared across options.

Every option ``i`` of observation ``k`` carries a feature row ``x_i^k`` and is
chosen with probability proportional to ``exp(theta @ x_i^k)``.  Features are
stored densely as an ``(n, m, n_obj)`` array.
"""

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "ChoiceDataset",
    "DatasetFormatError",
    "PriorSpec",
    "as_theta",
    "build_softmax_features",
    "choice_probabilities",
    "flat_prior",
    "gaussian_prior",
    "log_likelihood",
    "log_likelihood_gradient",
    "log_likelihood_hessian",
    "read_dataset_csv",
    "simulate_choices",
    "write_dataset_csv",
]

FLOAT_FORMAT = "%.17g"


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed; carries the line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ChoiceDataset:
    """Observed choices together with the option features.

    Parameters
    ----------
    features : array_like, shape (n, m, n_obj)
        Feature row of every option for every observation.
    chosen : array_like of int, shape (n,)
        Zero-based index of the chosen option.
    """

    features: np.ndarray
    chosen: np.ndarray

    def __post_init__(self):
        x = np.array(self.features, dtype=float)
        y = np.asarray(self.chosen)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3:
            raise ValueError("features must have shape (n, m, n_obj)")
        n, m, n_obj = x.shape
        if n < 1 or m < 2 or n_obj < 1:
            raise ValueError(f"need n >= 1, m >= 2, n_obj >= 1; got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        if y.shape != (n,):
            raise ValueError(f"chosen must have shape ({n},), got {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("chosen indices must be integers")
        y = y.astype(np.int64)
        if np.any((y < 0) | (y >= m)):
            raise ValueError("chosen index out of range")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "chosen", y)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def m(self):
        return self.features.shape[1]

    @property
    def n_obj(self):
        return self.features.shape[2]

    def chosen_features(self):
        """Feature rows of the chosen options, shape (n, n_obj)."""
        return self.features[np.arange(self.n), self.chosen]

    def subset(self, index):
        """Dataset restricted to the observations selected by ``index``."""
        return ChoiceDataset(self.features[index], self.chosen[index])


def as_theta(theta, n_obj=None):
    """Validate a parameter vector and return it as a float array."""
    t = np.atleast_1d(np.asarray(theta, dtype=float))
    if t.ndim != 1:
        raise ValueError("theta must be a vector")
    if n_obj is not None and t.shape[0] != n_obj:
        raise ValueError(f"theta has length {t.shape[0]}, expected {n_obj}")
    if not np.all(np.isfinite(t)):
        raise ValueError("theta contains non-finite values")
    return t


def choice_probabilities(features, theta):
    """Softmax choice probabilities for a single observation.

    Parameters
    ----------
    features : array_like, shape (m, n_obj)
    theta : array_like, shape (n_obj,)

    Returns
    -------
    ndarray, shape (m,)
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("features must have shape (m, n_obj)")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    t = as_theta(theta, x.shape[1])
    u = x @ t
    u = u - u.max()
    w = np.exp(u)
    return w / w.sum()


def _utilities(data, theta):
    t = as_theta(theta, data.n_obj)
    with np.errstate(over="ignore", invalid="ignore"):
        u = data.features @ t
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite utilities")
    return t, u


def _probabilities(u):
    u = u - u.max(axis=1, keepdims=True)
    w = np.exp(u)
    return w / w.sum(axis=1, keepdims=True)


def log_likelihood(data, theta):
    """Log-likelihood of the observed choices at ``theta``."""
    _, u = _utilities(data, theta)
    value = float(np.sum(u[np.arange(data.n), data.chosen] - logsumexp(u, axis=1)))
    if not np.isfinite(value):
        raise FloatingPointError("log-likelihood is not finite")
    return value


def log_likelihood_gradient(data, theta):
    """Gradient of :func:`log_likelihood` with respect to ``theta``."""
    _, u = _utilities(data, theta)
    p = _probabilities(u)
    mean_x = np.einsum("km,kmj->kj", p, data.features)
    return (data.chosen_features() - mean_x).sum(axis=0)


def log_likelihood_hessian(data, theta):
    """Hessian of :func:`log_likelihood`; always negative semidefinite.

    Uses per-observation centred features, so the result is minus a sum of
    weighted outer products and cannot lose semidefiniteness to cancellation.
    """
    _, u = _utilities(data, theta)
    p = _probabilities(u)
    mean_x = np.einsum("km,kmj->kj", p, data.features)
    centred = data.features - mean_x[:, None, :]
    weighted = centred * np.sqrt(p)[:, :, None]
    flat = weighted.reshape(-1, data.n_obj)
    h = -(flat.T @ flat)
    return 0.5 * (h + h.T)


def evaluate(data, theta):
    """Log-likelihood, gradient and Hessian in one pass."""
    _, u = _utilities(data, theta)
    idx = np.arange(data.n)
    lse = logsumexp(u, axis=1)
    value = float(np.sum(u[idx, data.chosen] - lse))
    p = np.exp(u - lse[:, None])
    mean_x = np.einsum("km,kmj->kj", p, data.features)
    grad = (data.chosen_features() - mean_x).sum(axis=0)
    centred = data.features - mean_x[:, None, :]
    flat = (centred * np.sqrt(p)[:, :, None]).reshape(-1, data.n_obj)
    hess = -(flat.T @ flat)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise FloatingPointError("log-likelihood is not finite")
    return value, grad, 0.5 * (hess + hess.T)


def simulate_choices(features, theta, rng):
    """Draw one choice per observation from the model.

    Uses inverse-CDF sampling on a single uniform per observation so the
    stream consumption does not depend on the probabilities.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    p = _probabilities(x @ as_theta(theta, x.shape[2]))
    cdf = np.cumsum(p, axis=1)
    draws = rng.random(x.shape[0])
    chosen = (cdf < draws[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(chosen, x.shape[1] - 1)


@dataclass(frozen=True)
class PriorSpec:
    """Log prior density on ``theta`` for MAP estimation.

    ``log_density_hessian`` is optional; without it MAP covariances fall back
    to a central difference of the gradient.
    """

    log_density: Callable[[np.ndarray], float]
    log_density_gradient: Callable[[np.ndarray], np.ndarray]
    log_density_hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    description: dict = field(default_factory=dict)

    def hessian(self, theta, step=1e-5):
        if self.log_density_hessian is not None:
            return np.asarray(self.log_density_hessian(theta), dtype=float)
        theta = np.asarray(theta, dtype=float)
        k = theta.size
        h = np.empty((k, k))
        for j in range(k):
            e = np.zeros(k)
            e[j] = step * max(1.0, abs(theta[j]))
            h[:, j] = (self.log_density_gradient(theta + e)
                       - self.log_density_gradient(theta - e)) / (2 * e[j])
        return 0.5 * (h + h.T)


def flat_prior(n_obj):
    """Improper uniform prior; MAP then coincides with ML."""
    return PriorSpec(
        log_density=lambda theta: 0.0,
        log_density_gradient=lambda theta: np.zeros(n_obj),
        log_density_hessian=lambda theta: np.zeros((n_obj, n_obj)),
        description={"kind": "flat"},
    )


def gaussian_prior(mean, cov):
    """Multivariate normal prior ``N(mean, cov)``."""
    mean = as_theta(mean)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (mean.size, mean.size):
        raise ValueError("prior covariance shape does not match mean")
    chol = np.linalg.cholesky(cov)
    precision = np.linalg.inv(cov)
    precision = 0.5 * (precision + precision.T)
    log_norm = -0.5 * mean.size * np.log(2 * np.pi) - np.log(np.diag(chol)).sum()

    def log_density(theta):
        r = np.asarray(theta, dtype=float) - mean
        return float(log_norm - 0.5 * r @ precision @ r)

    def gradient(theta):
        return -precision @ (np.asarray(theta, dtype=float) - mean)

    return PriorSpec(
        log_density=log_density,
        log_density_gradient=gradient,
        log_density_hessian=lambda theta: -precision,
        description={"kind": "gaussian", "mean": mean.tolist(), "cov": cov.tolist()},
    )


def build_softmax_features(kind, values, times=None, prediction_errors=None,
                           previous_choices=None):
    """Feature matrices for the standard softmax decision models.

    Parameters
    ----------
    kind : {"temperature", "cooling", "q_learning"}
        ``"temperature"``: values with unknown constant temperature, so
        ``theta = 1/tau`` and ``x_i = V_i``.
        ``"cooling"``: logarithmic cooling schedule ``tau = nu / log t``, so
        ``x_i = V_i log t``.
        ``"q_learning"``: one-step Q-learning with unknown temperature and
        learning rate, ``x_i = [V_i^{t-1}, delta_{t-1} 1{i = i_{t-1}}]``.
    values : array_like, shape (..., m)
        Option values (``V^{t-1}`` for q_learning).
    times : array_like, shape (...), optional
        Decision times, required for ``"cooling"``.
    prediction_errors, previous_choices : array_like, shape (...), optional
        ``delta_{t-1}`` and zero-based ``i_{t-1}``, required for q_learning.

    Returns
    -------
    ndarray, shape (..., m, n_obj)
    """
    v = np.asarray(values, dtype=float)
    if kind == "temperature":
        return v[..., None]
    if kind == "cooling":
        if times is None:
            raise ValueError("cooling features need decision times")
        t = np.asarray(times, dtype=float)
        if np.any(t < 1):
            raise ValueError("decision times start at 1")
        if np.any(t == 1):
            # log 1 = 0 zeroes every feature of that observation
            raise ValueError("t = 1 gives all-zero features and cannot identify theta")
        return (v * np.log(t)[..., None])[..., None]
    if kind == "q_learning":
        if prediction_errors is None or previous_choices is None:
            raise ValueError("q_learning features need prediction errors and previous choices")
        delta = np.asarray(prediction_errors, dtype=float)
        prev = np.asarray(previous_choices)
        onehot = np.arange(v.shape[-1]) == prev[..., None]
        return np.stack([v, delta[..., None] * onehot], axis=-1)
    raise ValueError(f"unknown feature kind {kind!r}")


def write_dataset_csv(data, path):
    """Write ``obs,option,chosen,f1..`` rows, one per (observation, option)."""
    header = ["obs", "option", "chosen"] + [f"f{j + 1}" for j in range(data.n_obj)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(data.n):
            for i in range(data.m):
                row = [k + 1, i + 1, int(data.chosen[k] == i)]
                row += [FLOAT_FORMAT % v for v in data.features[k, i]]
                w.writerow(row)


def read_dataset_csv(path):
    """Parse a dataset written by :func:`write_dataset_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty file", 1) from None
        header = [h.strip() for h in header]
        n_obj = len(header) - 3
        expected = ["obs", "option", "chosen"] + [f"f{j + 1}" for j in range(n_obj)]
        if n_obj < 1 or header != expected:
            raise DatasetFormatError(f"bad header {header}", 1)
        blocks = []
        current = None
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_obj + 3:
                raise DatasetFormatError(f"expected {n_obj + 3} fields, got {len(row)}", line)
            try:
                obs, option, chosen = int(row[0]), int(row[1]), int(row[2])
                feats = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise DatasetFormatError(str(exc), line) from None
            if chosen not in (0, 1):
                raise DatasetFormatError("chosen must be 0 or 1", line)
            if not all(np.isfinite(feats)):
                raise DatasetFormatError("non-finite feature", line)
            if current is None or obs != current["obs"]:
                if obs != len(blocks) + 1:
                    raise DatasetFormatError(
                        f"observation {obs} out of sequence, expected {len(blocks) + 1}", line)
                current = {"obs": obs, "rows": [], "chosen": [], "line": line}
                blocks.append(current)
            if option != len(current["rows"]) + 1:
                raise DatasetFormatError(f"option {option} out of sequence", line)
            current["rows"].append(feats)
            current["chosen"].append(chosen)
    if not blocks:
        raise DatasetFormatError("no observations")
    m = len(blocks[0]["rows"])
    features, chosen = [], []
    for b in blocks:
        if len(b["rows"]) != m:
            raise DatasetFormatError(
                f"observation {b['obs']} has {len(b['rows'])} options, expected {m}", b["line"])
        if sum(b["chosen"]) != 1:
            raise DatasetFormatError(
                f"observation {b['obs']} must have exactly one chosen option", b["line"])
        features.append(b["rows"])
        chosen.append(b["chosen"].index(1))
    return ChoiceDataset(np.array(features), np.array(chosen))
