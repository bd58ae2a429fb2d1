"""Seeded, self-describing experiment runs and plot-ready output.

Layout of an artifact directory::

    <output_dir>/
        config.json
        summary.json
        seed_<s>/
            metadata.json      config, derived seeds, versions, config hash
            environment.json   the bundle actually used
            trajectory.csv     strided iterates (17 significant digits)
            spectral.json
            diagnostics.json

Seed splitting: a run seed ``s`` is expanded with
``numpy.random.SeedSequence(s).spawn(2)`` into an environment seed and a
trajectory seed (the first 32-bit word of each child's state).  A fixed
``env_seed`` in the config overrides the derived environment seed so that all
run seeds share one environment.
"""
from __future__ import annotations

import csv
import datetime
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    dump_json,
    lln_check,
    rate_of_change,
    stability_monitor,
    trace_statistics,
)
from .environments import BUILTINS, EnvironmentBundle, builtin_environment, check_assumptions, load_bundle, save_bundle
from .learners import (
    ALGORITHMS,
    DEFAULT_STRIDE,
    GENERATOR_NAME,
    LearnerConfig,
    LearnerConfigError,
    Schedule,
    Trajectory,
    fmt,
    iter_update_terms,
    run,
)
from .mdp import RankDeficientError
from .ode import InterpolatedPath, LinearField, TimePartition, tracking_errors
from .spectral import etd_expected_system, gtd_expected_system, spectral_report, td_mean_field

PLOT_SERIES = ("theta_error", "norm_x", "norm_e", "rate_of_change", "f_sup")
# rate-of-change needs every sample in memory: cap the number of stored values
MAX_ROC_VALUES = 1 << 22
MAX_LLN_SAMPLES = 1 << 21
MIN_SEGMENT_KNOTS = 3


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


@dataclass(frozen=True)
class ExperimentConfig:
    environment: str
    algorithm: str
    lam: float
    schedule: Schedule
    n_steps: int
    seeds: tuple
    record_stride: int = DEFAULT_STRIDE
    interest: tuple | float | None = None
    output_dir: str = "runs"
    env_seed: int | None = None
    theta0: tuple | None = None
    segment_T: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.interest is not None and self.algorithm != "etd":
            raise ConfigError("interest applies to etd only")
        if isinstance(self.n_steps, bool) or int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")
        if len(self.seeds) == 0:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            dup = next(s for s in self.seeds if list(self.seeds).count(s) > 1)
            raise ConfigError(f"seeds must be distinct; {dup} repeats")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if self.record_stride < 1:
            raise ConfigError("record_stride must be >= 1")
        if self.segment_T <= 0 or self.tau <= 0:
            raise ConfigError("segment_T and tau must be positive")
        if self.environment not in BUILTINS and not os.path.exists(self.environment):
            raise ConfigError(f"environment {self.environment!r} is neither a builtin {BUILTINS} nor a file")

    # -- serialisation --

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = {"B1": float(self.schedule.B1), "B2": float(self.schedule.B2),
                         "beta": float(self.schedule.beta)}
        d["lam"] = float(self.lam)
        d["n_steps"] = int(self.n_steps)
        d["seeds"] = [int(s) for s in self.seeds]
        for key in ("interest", "theta0"):
            if isinstance(d[key], tuple):
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        missing = {"environment", "algorithm", "lam", "schedule", "n_steps", "seeds"} - set(doc)
        if missing:
            raise ConfigError(f"missing config fields {sorted(missing)}")
        sched = doc["schedule"]
        try:
            if isinstance(sched, dict):
                doc["schedule"] = Schedule(float(sched["B1"]), float(sched["B2"]), float(sched.get("beta", 1.0)))
            else:
                doc["schedule"] = Schedule(*(float(v) for v in sched))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad schedule {sched!r}: {exc}") from exc
        doc["seeds"] = tuple(doc["seeds"])
        for key in ("interest", "theta0"):
            if isinstance(doc.get(key), list):
                doc[key] = tuple(doc[key])
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON, ignoring where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def split_seed(seed: int, env_seed: int | None = None) -> tuple[int, int]:
    """``(environment seed, trajectory seed)`` for run seed ``seed``."""
    env_ss, traj_ss = np.random.SeedSequence(int(seed)).spawn(2)
    derived_env = int(env_ss.generate_state(1)[0])
    traj = int(traj_ss.generate_state(1)[0])
    return (derived_env if env_seed is None else int(env_seed)), traj


def make_environment(source: str, env_seed: int) -> EnvironmentBundle:
    if source in BUILTINS:
        return builtin_environment(source, seed=env_seed)
    if not os.path.exists(source):
        raise ConfigError(f"environment {source!r} is neither a builtin {BUILTINS} nor a file")
    return load_bundle(source)


# -- analytic reference ----------------------------------------------------------


@dataclass
class Reference:
    """Mean field in the learner's own coordinates plus the theta fixed point."""

    mean_field: LinearField | None
    theta_star: np.ndarray | None
    report: dict = field(default_factory=dict)
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    C: np.ndarray | None = None


def analytic_reference(bundle: EnvironmentBundle, algorithm: str, lam: float) -> Reference:
    mdp, pi, mu, Phi = bundle.mdp, bundle.pi, bundle.mu, bundle.features
    pi_or_mu = pi if algorithm == "td" else mu
    try:
        if algorithm == "gtd":
            sys_ = gtd_expected_system(mdp, pi, mu, lam, Phi)
            block = spectral_report(sys_.A_block, sys_.b_block)
            inner = spectral_report(sys_.A, sys_.b)
            return Reference(
                mean_field=LinearField(sys_.A_block, sys_.b_block, "gtd"),
                theta_star=inner.fixed_point,
                report={"A": inner.to_dict(), "A_block": block.to_dict()},
                A=sys_.A, b=sys_.b, C=sys_.C,
            )
        if algorithm == "etd":
            sys_ = etd_expected_system(mdp, pi, mu, lam, bundle.interest_vector(), Phi)
            rep = spectral_report(sys_.A, sys_.b)
            return Reference(LinearField(sys_.A, sys_.b, "etd"), rep.fixed_point, {"A": rep.to_dict()}, sys_.A, sys_.b)
    except RankDeficientError as exc:
        # e.g. the over-parameterised star: no unique fixed point; fall back
        # to the plain TD mean field for the report
        A, b = td_mean_field(mdp, pi, mu, lam, Phi)
        rep = spectral_report(A, b)
        return Reference(None, None, {"A": rep.to_dict(), "note": f"features rank deficient: {exc}"}, A, b)
    A, b = td_mean_field(mdp, pi, pi_or_mu, lam, Phi)
    rep = spectral_report(A, b)
    return Reference(LinearField(A, b, algorithm), rep.fixed_point, {"A": rep.to_dict()}, A, b)


# -- trajectories on disk ------------------------------------------------------------


def load_trajectory(path, algorithm: str | None = None) -> Trajectory:
    """Inverse of :meth:`Trajectory.to_csv` (exact, thanks to 17-digit floats)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = {name: i for i, name in enumerate(header)}
    data = np.array([[float(v) for v in row] for row in rows]) if rows else np.zeros((0, len(header)))
    theta_cols = [cols[h] for h in header if h.startswith("theta_")]
    nu_cols = [cols[h] for h in header if h.startswith("nu_")]
    diverged = bool(len(rows) and data[-1, cols["diverged"]] == 1)
    steps = data[:, cols["step"]].astype(np.int64)
    if algorithm is None:
        algorithm = "gtd" if nu_cols else ("etd" if "F" in cols else "td")
    return Trajectory(
        algorithm=algorithm,
        steps=steps,
        alpha=data[:, cols["alpha"]],
        theta=data[:, theta_cols],
        nu=data[:, nu_cols] if nu_cols else None,
        norm_x=data[:, cols["norm_x"]],
        norm_e=data[:, cols["norm_e"]],
        F=data[:, cols["F"]] if "F" in cols else None,
        diverged=diverged,
        diverged_at=int(steps[-1]) if diverged else None,
    )


def _write_json(obj, path) -> None:
    dump_json(obj, path)


def _versions() -> dict:
    import numba
    import scipy

    return {
        "package": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "platform": platform.platform(),
    }


# -- single run ------------------------------------------------------------------------


def _run_one(config: ExperimentConfig, seed: int, run_dir: Path) -> dict:
    env_seed, traj_seed = split_seed(seed, config.env_seed)
    bundle = make_environment(config.environment, env_seed)
    theta0 = config.theta0 if config.theta0 is not None else (
        None if bundle.theta0 is None else tuple(float(v) for v in bundle.theta0)
    )
    interest = config.interest
    if config.algorithm == "etd" and interest is None and bundle.interest is not None:
        interest = tuple(float(v) for v in bundle.interest)
    try:
        cfg = LearnerConfig(config.algorithm, config.lam, interest=interest, theta0=theta0)
    except LearnerConfigError as exc:
        raise ConfigError(str(exc)) from exc
    run_dir.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, run_dir / "environment.json")
    traj = run(cfg, bundle.mdp, bundle.pi, bundle.mu, bundle.features, config.schedule,
               int(config.n_steps), traj_seed, stride=config.record_stride)
    traj.to_csv(run_dir / "trajectory.csv")

    single = ExperimentConfig.from_dict({**config.to_dict(), "seeds": [seed], "output_dir": str(run_dir)})
    _write_json({
        "config": single.to_dict(),
        "config_hash": config.config_hash(),
        "run_seed": int(seed),
        "env_seed": env_seed,
        "trajectory_seed": traj_seed,
        "seed_splitting": "SeedSequence(run_seed).spawn(2) -> (environment, trajectory); env_seed overrides",
        "generator": GENERATOR_NAME,
        "versions": _versions(),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }, run_dir / "metadata.json")

    ref = analytic_reference(bundle, config.algorithm, config.lam)
    spectral = dict(ref.report)
    spectral["assumptions"] = check_assumptions(bundle, config.lam, config.schedule).to_dict()
    _write_json(spectral, run_dir / "spectral.json")

    diag = diagnose_run(run_dir, traj=traj, bundle=bundle, ref=ref)
    terminal = None
    relative = None
    if ref.theta_star is not None and not traj.diverged:
        terminal = float(np.linalg.norm(traj.theta[-1] - ref.theta_star))
        scale = float(np.linalg.norm(ref.theta_star))
        relative = terminal / scale if scale > 0 else None
    return {
        "seed": int(seed),
        "directory": run_dir.name,
        "diverged": bool(traj.diverged),
        "diverged_at": traj.diverged_at,
        "terminal_theta_error": terminal,
        "terminal_relative_error": relative,
        "stability": diag["stability"]["verdict"],
    }


def _coarse_path(traj: Trajectory, schedule: Schedule, T: float):
    # Strided records: treat consecutive records as one coarse step whose size
    # is the sum of the step sizes in between.  With stride 1 this is exact.
    t = np.concatenate([[0.0], np.cumsum(schedule.alphas(int(traj.steps[-1])))])
    coarse = np.diff(t[traj.steps])
    part = TimePartition(coarse, T)
    return InterpolatedPath(traj.iterates, part)


def diagnose_run(run_dir, traj: Trajectory | None = None, bundle=None, ref=None, tau: float | None = None) -> dict:
    """Recompute the diagnostics of one run directory and write ``diagnostics.json``."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "metadata.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} missing")
    with open(meta_path) as fh:
        meta = json.load(fh)
    config = ExperimentConfig.from_dict(meta["config"])
    if traj is None:
        traj = load_trajectory(run_dir / "trajectory.csv", config.algorithm)
    if bundle is None:
        bundle = load_bundle(run_dir / "environment.json")
    if ref is None:
        ref = analytic_reference(bundle, config.algorithm, config.lam)
    tau = config.tau if tau is None else tau
    out: dict = {
        "stability": stability_monitor(traj).to_dict(),
        "traces": trace_statistics(traj).to_dict(),
    }
    seed = int(meta["trajectory_seed"])
    interest = None if config.algorithm != "etd" else bundle.interest_vector()
    n_roc = min(int(config.n_steps), MAX_ROC_VALUES // (bundle.K * bundle.K))
    a_samples = np.concatenate([
        a.reshape(len(a), -1) for a, _, _ in iter_update_terms(
            config.algorithm, bundle.mdp, bundle.pi, bundle.mu, bundle.features, config.lam,
            n_roc, seed, interest=interest,
        )
    ])
    t = np.concatenate([[0.0], np.cumsum(config.schedule.alphas(n_roc))])
    reach = int(np.searchsorted(t, t[-1] - tau, side="right")) - 1
    points = np.unique(np.geomspace(100, max(101, reach), 12).astype(np.int64))
    points = points[points < reach]
    center = None if ref.A is None else ref.A.reshape(-1)
    if len(points) >= 3:
        roc = rate_of_change(a_samples, config.schedule, tau, points, center=center)
        out["rate_of_change"] = roc.to_dict()
    else:
        out["rate_of_change"] = None
    del a_samples
    n_lln = min(int(config.n_steps), MAX_LLN_SAMPLES)
    if ref.A is not None and n_lln >= 10_000:
        terms = iter_update_terms(config.algorithm, bundle.mdp, bundle.pi, bundle.mu, bundle.features,
                                  config.lam, n_lln, seed, interest=interest)
        out["lln_A"] = lln_check((a for a, _, _ in terms), reference_mean=ref.A).to_dict()
    if ref.mean_field is not None and not traj.diverged and len(traj.steps) > 2:
        path = _coarse_path(traj, config.schedule, config.segment_T)
        part = path.partition
        n_seg = part.complete_segments()
        # a segment holding fewer than three recorded knots says nothing about
        # tracking (f_n vanishes at the first knot by construction)
        knots = np.diff(np.append(part.segment_starts, part.n_knots))[:n_seg]
        usable = np.flatnonzero(knots >= MIN_SEGMENT_KNOTS)
        sups = tracking_errors(path, ref.mean_field, segments=usable) if len(usable) else np.zeros(0)
        starts = traj.steps[part.segment_starts[usable]]
        out["tracking"] = {"T": config.segment_T, "segment_start_steps": starts.tolist(), "sup_norms": sups.tolist()}
    _write_json(out, run_dir / "diagnostics.json")
    return out


# -- batch -------------------------------------------------------------------------------


def _worker(args):
    config_dict, seed, run_dir = args
    return _run_one(ExperimentConfig.from_dict(config_dict), seed, Path(run_dir))


def run_experiment(config: ExperimentConfig, workers: int = 1) -> Path:
    """Run every seed of ``config``; returns the artifact directory."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(config.to_dict(), out / "config.json")
    jobs = [(config.to_dict(), int(s), str(out / f"seed_{int(s)}")) for s in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        results = [_worker(j) for j in jobs]
    summary = {
        "config_hash": config.config_hash(),
        "algorithm": config.algorithm,
        "environment": config.environment,
        "runs": sorted(results, key=lambda r: r["seed"]),
        "all_diverged": all(r["diverged"] for r in results),
        "any_diverged": any(r["diverged"] for r in results),
    }
    _write_json(summary, out / "summary.json")
    return out


def rerun(run_dir, output_dir) -> Path:
    """Re-execute a single run from its ``metadata.json`` into ``output_dir``."""
    with open(Path(run_dir) / "metadata.json") as fh:
        meta = json.load(fh)
    doc = dict(meta["config"])
    doc["output_dir"] = str(output_dir)
    return run_experiment(ExperimentConfig.from_dict(doc))


# -- plot data ------------------------------------------------------------------------------


def emit_plot_data(artifact_dir, seeds=None, out_path=None) -> Path:
    """Long-format ``seed, step, series, value`` CSV across the runs of an artifact directory."""
    artifact_dir = Path(artifact_dir)
    summary_path = artifact_dir / "summary.json"
    if not summary_path.exists():
        raise FileNotFoundError(f"{summary_path} missing; not an artifact directory")
    with open(summary_path) as fh:
        summary = json.load(fh)
    runs = summary["runs"]
    if seeds is not None:
        wanted = {int(s) for s in seeds}
        runs = [r for r in runs if r["seed"] in wanted]
    out_path = Path(out_path) if out_path is not None else artifact_dir / "plot_data.csv"
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "step", "series", "value"])
        for r in runs:
            run_dir = artifact_dir / r["directory"]
            for name in ("trajectory.csv", "diagnostics.json", "spectral.json"):
                if not (run_dir / name).exists():
                    raise FileNotFoundError(f"{run_dir / name} missing")
            traj = load_trajectory(run_dir / "trajectory.csv")
            with open(run_dir / "diagnostics.json") as f2:
                diag = json.load(f2)
            with open(run_dir / "spectral.json") as f2:
                spectral = json.load(f2)
            seed = r["seed"]
            star = spectral.get("A", {}).get("fixed_point")
            if star is not None:
                err = np.linalg.norm(traj.theta - np.asarray(star), axis=1)
                for st, v in zip(traj.steps, err):
                    w.writerow([seed, int(st), "theta_error", fmt(v)])
            for st, v in zip(traj.steps, traj.norm_x):
                w.writerow([seed, int(st), "norm_x", fmt(v)])
            for st, v in zip(traj.steps, traj.norm_e):
                w.writerow([seed, int(st), "norm_e", fmt(v)])
            roc = diag.get("rate_of_change")
            if roc:
                for st, v in zip(roc["eval_points"], roc["values"]):
                    w.writerow([seed, int(st), "rate_of_change", fmt(v)])
            trk = diag.get("tracking")
            if trk:
                for st, v in zip(trk["segment_start_steps"], trk["sup_norms"]):
                    w.writerow([seed, int(st), "f_sup", fmt(v)])
    return out_path


__all__ = [
    "ConfigError", "ExperimentConfig", "split_seed", "make_environment", "analytic_reference",
    "load_trajectory", "diagnose_run", "run_experiment", "rerun", "emit_plot_data",
]
