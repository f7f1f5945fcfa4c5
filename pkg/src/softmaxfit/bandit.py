"""Spatial Gaussian bandits and the stochastic UCL agent.

The agent holds a Gaussian belief over the arm means, scores each arm by its
upper credible limit and picks arms by softmax with the logarithmic cooling
schedule ``nu / log t``.

Arms are zero-based in memory; episode files number them from 1.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .special import norm_isf

__all__ = [
    "BanditEnv",
    "BeliefState",
    "EpisodeLog",
    "UclParams",
    "alpha_t",
    "belief_update",
    "bimodal_profile",
    "build_spatial_prior",
    "choice_distribution",
    "cumulative_regret",
    "grid_locations",
    "initial_belief",
    "landscape_from_profile",
    "read_episode",
    "run_episode",
    "run_random_episode",
    "select_arm",
    "ucl_heuristic",
    "unimodal_profile",
    "write_episode",
]

SQRT_2PI_E = float(np.sqrt(2.0 * np.pi * np.e))


@dataclass(frozen=True)
class BanditEnv:
    mean_rewards: np.ndarray
    reward_sd: float
    arm_locations: np.ndarray
    horizon: int

    def __post_init__(self):
        means = np.array(self.mean_rewards, dtype=float)
        locs = np.array(self.arm_locations, dtype=float)
        if means.ndim != 1 or not np.all(np.isfinite(means)):
            raise ValueError("mean rewards must be a finite vector")
        if locs.shape != (means.size, 2):
            raise ValueError("need one 2-D location per arm")
        if self.reward_sd < 0 or self.horizon < 1:
            raise ValueError("reward_sd must be >= 0 and horizon >= 1")
        means.setflags(write=False)
        locs.setflags(write=False)
        object.__setattr__(self, "mean_rewards", means)
        object.__setattr__(self, "arm_locations", locs)

    @property
    def n_arms(self):
        return self.mean_rewards.size

    def to_dict(self):
        return {
            "mean_rewards": self.mean_rewards.tolist(),
            "reward_sd": float(self.reward_sd),
            "arm_locations": self.arm_locations.tolist(),
            "horizon": int(self.horizon),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean_rewards"]), float(d["reward_sd"]),
                   np.asarray(d["arm_locations"]), int(d["horizon"]))


@dataclass(frozen=True)
class UclParams:
    """Stochastic UCL parameters.

    ``mu0`` is the prior mean shared by all arms, ``sigma0_sq`` scales the
    prior covariance, ``lam`` is the correlation length, ``nu`` the cooling
    constant and ``sigma_s_sq`` the reward noise variance the agent assumes.
    """

    mu0: float
    sigma0_sq: float
    lam: float
    nu: float
    sigma_s_sq: float

    def __post_init__(self):
        if not all(np.isfinite([self.mu0, self.sigma0_sq, self.lam, self.nu, self.sigma_s_sq])):
            raise ValueError("UCL parameters must be finite")
        if self.sigma0_sq < 0 or self.lam < 0:
            raise ValueError("sigma0_sq and lam must be non-negative")
        if self.nu <= 0 or self.sigma_s_sq <= 0:
            raise ValueError("nu and sigma_s_sq must be positive")

    def to_dict(self):
        return {k: float(v) for k, v in asdict(self).items()}


def grid_locations(rows=10, cols=10):
    """Unit-spaced grid coordinates, row-major; arm ``r*cols + c`` sits at (c, r)."""
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.column_stack([c, r]).astype(float)


def unimodal_profile(size=10, peak=6, low=0.0, high=100.0):
    """Concave profile with a single maximum at 1-based position ``peak``."""
    x = np.arange(1, size + 1, dtype=float)
    spread = max(peak - 1, size - peak, 1)
    return high - (high - low) * ((x - peak) / spread) ** 2


def bimodal_profile(size=10, low=0.0, local_high=70.0, high=100.0, dip=3.5):
    """Profile with local maxima at both ends; the right end is global."""
    x = np.arange(1, size + 1, dtype=float)
    left = np.exp(-((x - 1.0) / dip) ** 2)
    right = np.exp(-((x - size) / dip) ** 2)
    return low + (local_high - low) * left + (high - low) * right


def landscape_from_profile(profile, rows=None):
    """Grid means that follow ``profile`` along x and are flat along y."""
    profile = np.asarray(profile, dtype=float)
    rows = profile.size if rows is None else rows
    return np.tile(profile, rows)


def build_spatial_prior(locations, lam):
    """Exponential-in-distance correlation matrix ``exp(-|z_i - z_j| / lam)``.

    ``lam = 0`` gives the identity (uncorrelated arms).
    """
    z = np.asarray(locations, dtype=float)
    if lam < 0:
        raise ValueError("correlation length must be non-negative")
    n = z.shape[0]
    if lam == 0:
        return np.eye(n)
    dist = cdist(z, z)
    if np.any(dist[~np.eye(n, dtype=bool)] == 0):
        raise ValueError("duplicate arm locations make the spatial prior singular")
    return np.exp(-dist / lam)


@dataclass(frozen=True)
class BeliefState:
    """Posterior over arm means after ``t`` observed rewards.

    ``precision`` is ``None`` when the prior variance is zero (infinite
    prior precision); the belief then never moves.
    """

    mu: np.ndarray
    covariance: np.ndarray
    precision: Optional[np.ndarray]
    counts: np.ndarray
    reward_sums: np.ndarray
    t: int

    @property
    def empirical_means(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.reward_sums / np.maximum(self.counts, 1), np.nan)


def initial_belief(params, locations):
    """Prior belief ``N(mu0 * 1, sigma0^2 * Sigma)``."""
    corr = build_spatial_prior(locations, params.lam)
    n = corr.shape[0]
    mu = np.full(n, float(params.mu0))
    cov = params.sigma0_sq * corr
    precision = None
    if params.sigma0_sq > 0:
        precision = np.linalg.inv(corr) / params.sigma0_sq
        precision = 0.5 * (precision + precision.T)
    return BeliefState(mu, cov, precision, np.zeros(n, dtype=np.int64), np.zeros(n), 0)


def belief_update(state, arm, reward, params):
    """Absorb one reward from ``arm`` (rank-one Gaussian update).

    The precision gains ``e_a e_a^T / sigma_s^2``; mean and covariance follow
    from the Sherman-Morrison form of the same update.
    """
    counts = state.counts.copy()
    counts[arm] += 1
    sums = state.reward_sums.copy()
    sums[arm] += reward
    if state.precision is None:
        return BeliefState(state.mu, state.covariance, None, counts, sums, state.t + 1)
    s2 = params.sigma_s_sq
    col = state.covariance[:, arm]
    denom = s2 + col[arm]
    gain = col / denom
    mu = state.mu + gain * (reward - state.mu[arm])
    cov = state.covariance - np.outer(gain, col)
    cov = 0.5 * (cov + cov.T)
    precision = state.precision.copy()
    precision[arm, arm] += 1.0 / s2
    return BeliefState(mu, cov, precision, counts, sums, state.t + 1)


def alpha_t(t):
    """Credible-tail probability ``1 / (sqrt(2 pi e) t)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 1):
        raise ValueError("decision time starts at 1")
    return 1.0 / (SQRT_2PI_E * t)


def ucl_heuristic(state, t=None):
    """Upper credible limit ``mu_i + sigma_i * Phi^{-1}(1 - alpha_t)``.

    ``t`` is the decision time; by default the decision after the ``state.t``
    rewards already absorbed, i.e. ``state.t + 1``.
    """
    t = state.t + 1 if t is None else t
    var = np.diag(state.covariance)
    if np.any(var < -1e-12 * max(1.0, float(np.max(np.abs(var))))):
        raise ValueError("belief covariance is not positive semidefinite")
    sigma = np.sqrt(np.clip(var, 0.0, None))
    return state.mu + sigma * norm_isf(alpha_t(t))


def choice_distribution(q, t, nu):
    """Softmax probabilities with inverse temperature ``log t / nu``."""
    q = np.asarray(q, dtype=float)
    if t < 1 or nu <= 0:
        raise ValueError("need t >= 1 and nu > 0")
    if t == 1:
        return np.full(q.size, 1.0 / q.size)
    u = q * (np.log(t) / nu)
    u = u - u.max()
    w = np.exp(u)
    return w / w.sum()


def select_arm(q, t, nu, rng):
    """Sample an arm from :func:`choice_distribution`."""
    p = choice_distribution(q, t, nu)
    idx = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    return min(idx, p.size - 1)


@dataclass(frozen=True)
class EpisodeLog:
    choices: np.ndarray
    rewards: np.ndarray
    seed: Optional[int] = None
    params: Optional[UclParams] = None
    env: Optional[BanditEnv] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.choices) != len(self.rewards):
            raise ValueError("choices and rewards differ in length")
        object.__setattr__(self, "choices", np.asarray(self.choices, dtype=np.int64))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))

    @property
    def horizon(self):
        return self.choices.size

    def truncated(self, t):
        return EpisodeLog(self.choices[:t], self.rewards[:t], self.seed, self.params,
                          self.env, dict(self.meta))


def _streams(seed):
    reward_ss, select_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(reward_ss), np.random.default_rng(select_ss)


def run_episode(env, params, seed):
    """Play ``env.horizon`` rounds of stochastic UCL.

    Rewards and arm selection draw from separate streams spawned from
    ``seed``, so the run is reproducible.
    """
    reward_rng, select_rng = _streams(seed)
    state = initial_belief(params, env.arm_locations)
    choices = np.empty(env.horizon, dtype=np.int64)
    rewards = np.empty(env.horizon)
    for t in range(1, env.horizon + 1):
        q = ucl_heuristic(state, t)
        arm = select_arm(q, t, params.nu, select_rng)
        reward = env.mean_rewards[arm] + env.reward_sd * reward_rng.standard_normal()
        choices[t - 1] = arm
        rewards[t - 1] = reward
        state = belief_update(state, arm, reward, params)
    return EpisodeLog(choices, rewards, seed, params, env)


def run_random_episode(env, seed):
    """Uniform-random play; a regret baseline."""
    reward_rng, select_rng = _streams(seed)
    choices = select_rng.integers(0, env.n_arms, env.horizon)
    rewards = env.mean_rewards[choices] + env.reward_sd * reward_rng.standard_normal(env.horizon)
    return EpisodeLog(choices, rewards, seed, None, env)


def cumulative_regret(log, env):
    """``R_t = sum_{s <= t} (max_i m_i - m_{i_s})``."""
    gaps = env.mean_rewards.max() - env.mean_rewards[log.choices]
    return np.cumsum(gaps)


def write_episode(log, csv_path, json_path=None):
    """Write ``t,arm,reward`` rows and an optional JSON sidecar."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "arm", "reward"])
        for t, (arm, r) in enumerate(zip(log.choices, log.rewards), start=1):
            w.writerow([t, int(arm) + 1, "%.17g" % r])
    if json_path is not None:
        side = {
            "schema_version": 1,
            "seed": log.seed,
            "params": None if log.params is None else log.params.to_dict(),
            "env": None if log.env is None else log.env.to_dict(),
        }
        side.update(log.meta)
        with open(json_path, "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_episode(csv_path, json_path=None):
    choices, rewards = [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "arm", "reward"]:
            raise ValueError(f"{csv_path}: line 1: expected header t,arm,reward")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, arm, r = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{csv_path}: line {line}: {exc}") from None
            if t != len(choices) + 1 or arm < 1:
                raise ValueError(f"{csv_path}: line {line}: bad time or arm index")
            choices.append(arm - 1)
            rewards.append(r)
    seed = params = env = None
    if json_path is not None:
        with open(json_path) as fh:
            side = json.load(fh)
        seed = side.get("seed")
        if side.get("params"):
            params = UclParams(**side["params"])
        if side.get("env"):
            env = BanditEnv.from_dict(side["env"])
    return EpisodeLog(np.array(choices, dtype=np.int64), np.array(rewards), seed, params, env)
