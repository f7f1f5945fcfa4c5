"""Monte Carlo ensembles for parameter recovery and regret classification.

Every replicate draws from its own generator seeded by
``SeedSequence([seed, stream, *index])``, so results do not depend on the order in
which a worker pool finishes them.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bandit import cumulative_regret, run_episode
from .estimator import confidence_intervals, fit_ml
from .linearize import LinearizationPoint, fit_ucl, linearize_episode
from .model import ChoiceDataset, as_theta, simulate_choices

__all__ = [
    "RecoveryReport",
    "RegretClass",
    "classify_episodes",
    "classify_regret",
    "compare_points",
    "episode_seed",
    "lambda_grid",
    "parallel_map",
    "recovery_ensemble",
    "regret_slope",
    "replicate_rng",
    "simulate_linear_dataset",
    "simulate_ucl_episodes",
]


# leading key words keep design and choice streams apart
DESIGN_STREAM = 1
CHOICE_STREAM = 2


def replicate_rng(seed, *index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


def episode_seed(seed, index):
    """Integer episode seed derived from a master seed and an index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def parallel_map(fn, items, jobs=1):
    """``list(map(fn, items))``, optionally in a process pool; order is kept."""
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def simulate_linear_dataset(m, n, theta, rng, features=None):
    """Standard-normal features and choices drawn from the softmax model.

    Pass ``features`` to reuse a fixed design and redraw only the choices.
    """
    theta = as_theta(theta)
    if features is None:
        features = rng.standard_normal((n, m, theta.size))
    chosen = simulate_choices(features, theta, rng)
    return ChoiceDataset(features, chosen)


@dataclass(frozen=True)
class RecoveryReport:
    """Per sample size and coordinate summaries of a recovery ensemble.

    ``estimates[n]`` holds the accepted replicate estimates, one row each.
    """

    theta_true: np.ndarray
    level: float
    rows: list
    estimates: dict = field(default_factory=dict)

    COLUMNS = ("n", "coordinate", "true_value", "mean_estimate", "pct_lower", "pct_upper",
               "mean_ci_lower", "mean_ci_upper", "mean_ci_width", "empirical_width",
               "replicates", "failed")

    def row(self, n, coordinate):
        for r in self.rows:
            if r["n"] == n and r["coordinate"] == coordinate:
                return r
        raise KeyError((n, coordinate))


def _recovery_task(args):
    seed, n_idx, rep, features, theta, level, method = args
    rng = replicate_rng(seed, CHOICE_STREAM, n_idx, rep)
    data = simulate_linear_dataset(features.shape[1], features.shape[0], theta, rng, features)
    try:
        fit = fit_ml(data, method=method)
    except FloatingPointError:
        return None
    if not fit.converged or fit.covariance is None:
        return None
    ci = confidence_intervals(fit, level)
    return fit.theta_hat, ci.lower, ci.upper


def recovery_ensemble(m, theta, n_grid, replicates, seed, level=0.95, method="bfgs", jobs=1):
    """Fit many resimulated datasets per sample size.

    For each ``n`` one feature design is drawn and held fixed; only the
    choices are redrawn across replicates.  Replicates whose fit fails to
    converge or lacks a covariance are counted in ``failed`` and left out.

    Returns
    -------
    RecoveryReport
    """
    theta = as_theta(theta)
    tail = 100.0 * (1.0 - level) / 2.0
    rows, estimates = [], {}
    for n_idx, n in enumerate(n_grid):
        features = replicate_rng(seed, DESIGN_STREAM, n_idx).standard_normal((n, m, theta.size))
        tasks = [(seed, n_idx, r, features, theta, level, method) for r in range(replicates)]
        results = parallel_map(_recovery_task, tasks, jobs)
        ok = [r for r in results if r is not None]
        failed = len(results) - len(ok)
        est = np.array([r[0] for r in ok]).reshape(-1, theta.size)
        estimates[n] = est
        for j in range(theta.size):
            row = {"n": int(n), "coordinate": j + 1, "true_value": float(theta[j]),
                   "replicates": len(ok), "failed": failed}
            if ok:
                lo = np.array([r[1][j] for r in ok])
                hi = np.array([r[2][j] for r in ok])
                p_lo, p_hi = np.percentile(est[:, j], [tail, 100.0 - tail])
                row.update(mean_estimate=float(est[:, j].mean()), pct_lower=float(p_lo),
                           pct_upper=float(p_hi), mean_ci_lower=float(lo.mean()),
                           mean_ci_upper=float(hi.mean()), mean_ci_width=float((hi - lo).mean()),
                           empirical_width=float(p_hi - p_lo))
            else:
                row.update({k: math.nan for k in RecoveryReport.COLUMNS[3:10]})
            rows.append(row)
    return RecoveryReport(theta, level, rows, estimates)


def _episode_task(args):
    env, params, seed = args
    return run_episode(env, params, seed)


def simulate_ucl_episodes(env, params, n_episodes, seed, jobs=1):
    """Independent UCL episodes with seeds from :func:`episode_seed`."""
    tasks = [(env, params, episode_seed(seed, i)) for i in range(n_episodes)]
    return parallel_map(_episode_task, tasks, jobs)


def compare_points(log, locations, points, method="newton", require_identified=True):
    """Fit one episode about several linearization points.

    Returns the estimates and the index of the point with the highest
    log-likelihood; points whose fit raises are reported as ``None``.
    """
    estimates = []
    for point in points:
        ds = linearize_episode(log, locations, point)
        try:
            estimates.append(fit_ucl(ds, method=method, require_identified=require_identified))
        except ValueError:
            estimates.append(None)
    scores = [-math.inf if e is None else e.log_likelihood for e in estimates]
    best = int(np.argmax(scores)) if any(np.isfinite(scores)) else None
    return estimates, best


def lambda_grid(log, locations, mu0_bar, sigma0_sq_bar, lams, sigma_s_sq=0.01, method="newton"):
    """Refit about ``(mu0_bar, sigma0_sq_bar)`` for each correlation length.

    Returns a list of ``(lam, log_likelihood)`` pairs; ``nan`` marks a fit
    that could not be made.
    """
    out = []
    for lam in lams:
        point = LinearizationPoint.from_prior(mu0_bar, sigma0_sq_bar, lam, sigma_s_sq)
        try:
            est = fit_ucl(linearize_episode(log, locations, point), method=method)
            out.append((float(lam), float(est.log_likelihood)))
        except ValueError:
            out.append((float(lam), math.nan))
    return out


@dataclass(frozen=True)
class RegretClass:
    label: str
    slope: float
    intercept: float


def regret_slope(regret, window=(0.5, 1.0)):
    """Least-squares ``log R_t = a + b log t`` over ``t`` in the window.

    Only times with positive regret enter the fit.  Returns ``(b, a, used)``
    with ``b = nan`` when fewer than two times qualify.
    """
    regret = np.asarray(regret, dtype=float)
    T = regret.size
    t = np.arange(1, T + 1)
    lo, hi = window
    keep = (t >= lo * T) & (t <= hi * T) & (regret > 0)
    if keep.sum() < 2:
        return math.nan, math.nan, int(keep.sum())
    b, a = np.polyfit(np.log(t[keep]), np.log(regret[keep]), 1)
    return float(b), float(a), int(keep.sum())


def classify_regret(regret, window=(0.5, 1.0), ratio=0.4, reference_slope=1.0):
    """Label cumulative regret growth as ``optimal``, ``log-law`` or ``linear``.

    A heuristic: the log-log slope over the window is compared with
    ``ratio * reference_slope``, where linear growth has slope 1.  Regret that
    only turns positive at the very end of the window is sub-linear and
    labeled ``log-law``.
    """
    regret = np.asarray(regret, dtype=float)
    if regret.size == 0 or regret[-1] <= 0:
        return RegretClass("optimal", 0.0, math.nan)
    b, a, used = regret_slope(regret, window)
    if used < 2:
        return RegretClass("log-law", math.nan, math.nan)
    label = "log-law" if b < ratio * reference_slope else "linear"
    return RegretClass(label, b, a)


def classify_episodes(logs, env, **kwargs):
    return [classify_regret(cumulative_regret(log, env), **kwargs) for log in logs]
