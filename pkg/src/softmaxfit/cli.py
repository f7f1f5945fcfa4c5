"""Command-line entry point: simulate, estimate, recover, fit-ucl, classify-regret.

Each command reads one JSON config (unknown keys are rejected), applies
flag overrides, writes its results under ``out_dir`` and echoes the resolved
config there as ``config.json`` so the run can be repeated from it.
"""

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .bandit import (
    BanditEnv,
    UclParams,
    bimodal_profile,
    cumulative_regret,
    grid_locations,
    landscape_from_profile,
    read_episode,
    unimodal_profile,
    write_episode,
)
from .estimator import check_identification, confidence_intervals, fit_map, fit_ml
from .experiments import (
    classify_regret,
    compare_points,
    episode_seed,
    lambda_grid,
    parallel_map,
    recovery_ensemble,
    simulate_linear_dataset,
)
from .linearize import LinearizationPoint, fit_population, linearize_episode
from .model import DatasetFormatError, gaussian_prior, read_dataset_csv, write_dataset_csv

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IDENTIFICATION = 2
EXIT_CONVERGENCE = 3
EXIT_TRANSFORM = 4


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunConfig(Strict):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out_dir: str = "out"
    jobs: int = Field(1, ge=1)


class LinearBlock(Strict):
    m: int = Field(ge=2)
    n: int = Field(ge=1)
    theta: List[float] = Field(min_length=1)


class UclParamsBlock(Strict):
    mu0: float
    sigma0_sq: float = Field(ge=0)
    lam: float = Field(ge=0)
    nu: float = Field(gt=0)
    sigma_s_sq: float = Field(0.01, gt=0)


class LandscapeBlock(Strict):
    kind: Literal["unimodal", "bimodal", "custom"] = "unimodal"
    rows: int = Field(10, ge=1)
    cols: int = Field(10, ge=1)
    means: Optional[List[float]] = None
    low: float = 0.0
    high: float = 100.0
    local_high: float = 70.0
    peak: int = 6
    dip: float = 3.5
    reward_sd: float = Field(0.1, ge=0)

    @model_validator(mode="after")
    def _means_match(self):
        if self.kind == "custom":
            if self.means is None or len(self.means) != self.rows * self.cols:
                raise ValueError("custom landscape needs rows*cols means")
        elif self.means is not None:
            raise ValueError("means are only used by the custom landscape")
        return self

    def locations(self):
        return grid_locations(self.rows, self.cols)

    def mean_rewards(self):
        if self.kind == "custom":
            return np.asarray(self.means, dtype=float)
        if self.kind == "unimodal":
            prof = unimodal_profile(self.cols, self.peak, self.low, self.high)
        else:
            prof = bimodal_profile(self.cols, self.low, self.local_high, self.high, self.dip)
        return landscape_from_profile(prof, self.rows)

    def env(self, horizon):
        return BanditEnv(self.mean_rewards(), self.reward_sd, self.locations(), horizon)


class UclSimBlock(Strict):
    params: UclParamsBlock
    landscape: LandscapeBlock = LandscapeBlock()
    horizon: int = Field(100, ge=1)
    episodes: int = Field(1, ge=1)


class SimulateConfig(RunConfig):
    mode: Literal["linear", "ucl"]
    linear: Optional[LinearBlock] = None
    ucl: Optional[UclSimBlock] = None

    @model_validator(mode="after")
    def _block_present(self):
        if getattr(self, self.mode) is None:
            raise ValueError(f"mode {self.mode!r} needs a {self.mode!r} block")
        return self


class PriorBlock(Strict):
    mean: List[float]
    cov: List[List[float]]


class SolverBlock(Strict):
    method: Literal["bfgs", "newton"] = "bfgs"
    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(500, ge=1)


class EstimateConfig(RunConfig, SolverBlock):
    dataset: str
    level: float = Field(0.95, gt=0, lt=1)
    init: Optional[List[float]] = None
    prior: Optional[PriorBlock] = None
    force: bool = False


class RecoverConfig(RunConfig):
    m: int = Field(ge=2)
    theta: List[float] = Field(min_length=1)
    n_grid: List[int] = Field(min_length=1)
    replicates: int = Field(100, ge=1)
    level: float = Field(0.95, gt=0, lt=1)
    method: Literal["bfgs", "newton"] = "bfgs"

    @field_validator("n_grid")
    @classmethod
    def _positive(cls, v):
        if any(n < 1 for n in v):
            raise ValueError("sample sizes must be positive")
        return v


class PointBlock(Strict):
    mu0_bar: float
    sigma0_sq_bar: float = Field(gt=0)
    lam: float = Field(ge=0)
    sigma_s_sq: float = Field(0.01, gt=0)

    def point(self):
        return LinearizationPoint.from_prior(self.mu0_bar, self.sigma0_sq_bar, self.lam,
                                             self.sigma_s_sq)


class FitUclConfig(RunConfig):
    episodes: List[str] = Field(min_length=1)
    points: List[PointBlock] = Field(min_length=1)
    grid: Optional[LandscapeBlock] = None
    method: Literal["bfgs", "newton"] = "newton"
    level: float = Field(0.95, gt=0, lt=1)
    lambda_grid: Optional[List[float]] = None
    groups: Optional[List[str]] = None
    population_point: int = Field(0, ge=0)
    write_linearized: bool = False
    force: bool = False

    @model_validator(mode="after")
    def _consistent(self):
        if self.groups is not None and len(self.groups) != len(self.episodes):
            raise ValueError("groups needs one label per episode")
        if self.population_point >= len(self.points):
            raise ValueError("population_point is not a valid point index")
        return self


class ClassifyRegretConfig(RunConfig):
    episodes: List[str] = Field(min_length=1)
    landscape: Optional[LandscapeBlock] = None
    window: List[float] = Field(default_factory=lambda: [0.5, 1.0], min_length=2, max_length=2)
    ratio: float = Field(0.4, gt=0)
    reference_slope: float = Field(1.0, gt=0)


CONFIGS = {
    "simulate": SimulateConfig,
    "estimate": EstimateConfig,
    "recover": RecoverConfig,
    "fit-ucl": FitUclConfig,
    "classify-regret": ClassifyRegretConfig,
}


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message, code)
        self.code = code

    def __str__(self):
        return str(self.args[0])


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _num(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _write_table(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", *columns])
        for r in rows:
            w.writerow([SCHEMA_VERSION, *(_num(r.get(c)) for c in columns)])


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise CliError(f"--set {dotted}: {k} is not an object")
    node[keys[-1]] = value


def load_config(command, path=None, overrides=(), **flags):
    """Read, override and validate a command's config."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise CliError("config must be a JSON object")
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        _set_path(raw, key, value)
    for key, value in flags.items():
        if value is not None:
            raw[key] = value
    try:
        return CONFIGS[command].model_validate(raw)
    except ValidationError as exc:
        raise CliError(f"invalid {command} config:\n{exc}") from None


def _prepare_out(cfg):
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    _dump_json(cfg.model_dump(mode="json"), out / "config.json")
    return out


def cmd_simulate(cfg):
    out = _prepare_out(cfg)
    if cfg.mode == "linear":
        blk = cfg.linear
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        data = simulate_linear_dataset(blk.m, blk.n, blk.theta, rng)
        write_dataset_csv(data, out / "dataset.csv")
        _dump_json({"schema_version": SCHEMA_VERSION, "seed": cfg.seed, "m": blk.m, "n": blk.n,
                    "theta": blk.theta}, out / "dataset.json")
        print(f"wrote {data.n} observations to {out / 'dataset.csv'}")
        return EXIT_OK
    blk = cfg.ucl
    env = blk.landscape.env(blk.horizon)
    params = UclParams(**blk.params.model_dump())
    tasks = [(env, params, episode_seed(cfg.seed, i)) for i in range(blk.episodes)]
    logs = parallel_map(_run_episode_task, tasks, cfg.jobs)
    for i, log in enumerate(logs):
        log.meta["episode_index"] = i
        write_episode(log, out / f"episode_{i:03d}.csv", out / f"episode_{i:03d}.json")
    print(f"wrote {len(logs)} episodes of length {blk.horizon} to {out}")
    return EXIT_OK


def _run_episode_task(args):
    from .bandit import run_episode
    return run_episode(*args)


def _identification_dict(rep):
    return {
        "min_eigenvalue": rep.min_eigenvalue,
        "threshold": rep.threshold,
        "identified": rep.identified,
        "n_lower_bound": rep.n_lower_bound,
        "meets_sample_bound": rep.meets_sample_bound,
    }


def cmd_estimate(cfg):
    try:
        data = read_dataset_csv(cfg.dataset)
    except DatasetFormatError as exc:
        raise CliError(f"{cfg.dataset}: {exc}") from None
    except OSError as exc:
        raise CliError(f"cannot read dataset: {exc}") from None
    rep = check_identification(data)
    if not rep.identified and not cfg.force:
        raise CliError(
            f"data are not identified (min eigenvalue {rep.min_eigenvalue:.3g} <= "
            f"{rep.threshold:.3g}); rerun with --force to fit anyway", EXIT_IDENTIFICATION)
    out = _prepare_out(cfg)
    if cfg.prior is None:
        fit = fit_ml(data, init=cfg.init, method=cfg.method, tol=cfg.tol, max_iter=cfg.max_iter)
        kind = "ml"
    else:
        prior = gaussian_prior(cfg.prior.mean, cfg.prior.cov)
        fit = fit_map(data, prior, init=cfg.init, method=cfg.method, tol=cfg.tol,
                      max_iter=cfg.max_iter)
        kind = "map"
    result = {"schema_version": SCHEMA_VERSION, "estimator": kind, **fit.to_dict(),
              "identification": _identification_dict(rep), "n_obs": data.n}
    if fit.covariance is not None:
        ci = confidence_intervals(fit, cfg.level)
        result["confidence_interval"] = {"level": cfg.level, "lower": ci.lower.tolist(),
                                         "upper": ci.upper.tolist()}
    else:
        result["confidence_interval"] = None
    _dump_json(result, out / "fit.json")
    print(f"theta_hat = {np.array2string(fit.theta_hat, precision=6)}  "
          f"converged = {fit.converged}")
    if not rep.identified:
        print("warning: data are not identified; estimate forced", file=sys.stderr)
    return EXIT_OK if fit.converged else EXIT_CONVERGENCE


def cmd_recover(cfg):
    out = _prepare_out(cfg)
    report = recovery_ensemble(cfg.m, cfg.theta, cfg.n_grid, cfg.replicates, cfg.seed,
                               cfg.level, cfg.method, cfg.jobs)
    _write_table(out / "recovery.csv", report.COLUMNS, report.rows)
    failed = sum(r["failed"] for r in report.rows if r["coordinate"] == 1)
    print(f"wrote {len(report.rows)} rows to {out / 'recovery.csv'} ({failed} failed replicates)")
    return EXIT_OK


def _sidecar(path):
    p = Path(path).with_suffix(".json")
    return p if p.exists() else None


def _load_episode(path):
    try:
        return read_episode(path, _sidecar(path))
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read episode {path}: {exc}") from None


def _locations(log, grid):
    if grid is not None:
        return grid.locations()
    if log.env is not None:
        return log.env.arm_locations
    raise CliError("arm locations unknown: give a grid block or an episode sidecar with env")


def _fit_episode_task(args):
    path, points, grid, method, force = args
    log = _load_episode(path)
    locs = _locations(log, grid)
    if log.choices.max() >= locs.shape[0]:
        raise CliError(f"{path}: arm index exceeds the number of locations")
    ests, best = compare_points(log, locs, points, method=method, require_identified=not force)
    return log, locs, ests, best


def cmd_fit_ucl(cfg):
    out = _prepare_out(cfg)
    points = [p.point() for p in cfg.points]
    tasks = [(path, points, cfg.grid, cfg.method, cfg.force) for path in cfg.episodes]
    results = parallel_map(_fit_episode_task, tasks, cfg.jobs)
    rows, episodes, codes = [], [], []
    for idx, (path, (log, locs, ests, best)) in enumerate(zip(cfg.episodes, results)):
        entry = {"episode": path, "best_point": best, "points": []}
        for j, (pb, est) in enumerate(zip(cfg.points, ests)):
            row = {"episode": path, "point": j, "mu0_bar": pb.mu0_bar,
                   "sigma0_sq_bar": pb.sigma0_sq_bar, "lam": pb.lam, "best": j == best}
            if est is None:
                codes.append(EXIT_IDENTIFICATION)
                row["status"] = "unidentified"
                entry["points"].append({"status": "unidentified"})
                rows.append(row)
                continue
            d = est.to_dict()
            wide = [None] * 3
            if est.covariance is not None:
                ci = confidence_intervals(est.fit, cfg.level)
                wide = [bool(w > abs(t)) for w, t in zip(ci.width, est.theta)]
                d["confidence_interval"] = {"level": cfg.level, "lower": ci.lower.tolist(),
                                            "upper": ci.upper.tolist()}
            d["wide_ci"] = wide
            d["status"] = "ok" if est.valid else "flagged"
            entry["points"].append(d)
            if not est.fit.converged:
                codes.append(EXIT_CONVERGENCE)
            elif not est.valid:
                codes.append(EXIT_TRANSFORM)
            row.update(status=d["status"], log_likelihood=est.log_likelihood,
                       converged=est.fit.converged, valid=est.valid, nu=est.nu, mu0=est.mu0,
                       sigma0_sq=est.sigma0_sq)
            for k in range(3):
                row[f"theta{k + 1}"] = est.theta[k]
                row[f"wide_ci{k + 1}"] = wide[k]
            rows.append(row)
            if cfg.write_linearized:
                ds = linearize_episode(log, locs, points[j], episode_id=path)
                stem = out / f"linearized_{idx:03d}_p{j}"
                write_dataset_csv(ds.data, stem.with_suffix(".csv"))
                _dump_json(ds.provenance(), stem.with_suffix(".json"))
        if cfg.lambda_grid and best is not None:
            pb = cfg.points[best]
            grid = lambda_grid(log, locs, pb.mu0_bar, pb.sigma0_sq_bar, cfg.lambda_grid,
                               pb.sigma_s_sq, cfg.method)
            entry["lambda_grid"] = [{"lam": lam, "log_likelihood": ll} for lam, ll in grid]
        episodes.append(entry)
    result = {"schema_version": SCHEMA_VERSION, "episodes": episodes}
    if cfg.groups is not None:
        result["population"] = _population(cfg, results)
    _dump_json(result, out / "fit_ucl.json")
    columns = ["episode", "point", "mu0_bar", "sigma0_sq_bar", "lam", "status", "best",
               "log_likelihood", "converged", "valid", "theta1", "theta2", "theta3",
               "nu", "mu0", "sigma0_sq", "wide_ci1", "wide_ci2", "wide_ci3"]
    _write_table(out / "comparison.csv", columns, rows)
    print(f"fitted {len(episodes)} episodes at {len(points)} points; results in {out}")
    # identification outranks convergence, which outranks transform issues
    return min(codes) if codes else EXIT_OK


def _population(cfg, results):
    j = cfg.population_point
    estimates, labels = [], []
    for (_, _, ests, _), label in zip(results, cfg.groups):
        if ests[j] is not None:
            estimates.append(ests[j])
            labels.append(label)
    if not estimates:
        return {"unavailable": "no identified fits at the population point"}
    pop = fit_population(estimates, labels)
    by_group = {}
    for est, label in zip(estimates, labels):
        by_group.setdefault(label, []).append(est.log_likelihood)
    groups = {}
    for label, est in pop["groups"].items():
        d = est.to_dict()
        d["members"] = len(by_group[label])
        d["subject_log_likelihoods"] = by_group[label]
        d["mean_subject_log_likelihood"] = float(np.mean(by_group[label]))
        groups[label] = d
    return {"point": j, "groups": groups, "tests": pop["tests"]}


def cmd_classify_regret(cfg):
    out = _prepare_out(cfg)
    rows = []
    for path in cfg.episodes:
        log = _load_episode(path)
        if cfg.landscape is not None:
            env = cfg.landscape.env(log.horizon)
        elif log.env is not None:
            env = log.env
        else:
            raise CliError(f"{path}: no landscape in config or sidecar")
        regret = cumulative_regret(log, env)
        cls = classify_regret(regret, tuple(cfg.window), cfg.ratio, cfg.reference_slope)
        rows.append({"episode": path, "label": cls.label, "slope": cls.slope,
                     "intercept": cls.intercept, "final_regret": float(regret[-1]),
                     "horizon": log.horizon})
    _write_table(out / "regret.csv",
                 ["episode", "label", "slope", "intercept", "final_regret", "horizon"], rows)
    counts = {}
    for r in rows:
        counts[r["label"]] = counts.get(r["label"], 0) + 1
    print(", ".join(f"{k}: {v}" for k, v in sorted(counts.items())))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "recover": cmd_recover,
    "fit-ucl": cmd_fit_ucl,
    "classify-regret": cmd_classify_regret,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="softmaxfit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--jobs", type=int)
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config entry; VALUE is JSON")
        if name in ("estimate", "fit-ucl"):
            p.add_argument("--force", action="store_true", default=None,
                           help="fit even when the data are not identified")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    flags = {"seed": args.seed, "out_dir": args.out_dir, "jobs": args.jobs}
    if getattr(args, "force", None):
        flags["force"] = True
    try:
        cfg = load_config(args.command, args.config, args.overrides, **flags)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
