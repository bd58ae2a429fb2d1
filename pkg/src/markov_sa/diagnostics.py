"""Empirical checks on recorded SA runs.

Rate of change of the noise sums, law-of-large-numbers convergence of the
update terms, boundedness of the iterates and the spread of the eligibility
traces.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .learners import OVERFLOW_GUARD, Schedule, Trajectory
from .ode import TimePartition

MIN_LLN_SAMPLES = 10_000
TREND_SLOPE = -0.05
HEAVY_TAIL_GROWTH = 1.5


class InsufficientSamplesError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# -- rate of change ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RateOfChange:
    eval_points: np.ndarray
    values: np.ndarray
    tau: float
    slope: float
    p_value: float
    center: np.ndarray

    @property
    def decreasing(self) -> bool:
        return bool(self.slope < TREND_SLOPE)

    def to_dict(self) -> dict:
        return _jsonable({
            "eval_points": self.eval_points, "values": self.values, "tau": self.tau,
            "slope": self.slope, "p_value": self.p_value, "decreasing": self.decreasing,
            "center": self.center,
        })


def rate_of_change(g_samples, schedule, tau: float, eval_points, center=None) -> RateOfChange:
    """Worst partial sum of step-weighted, centered noise in a window around ``t(n)``.

    For each ``n`` in ``eval_points`` this is

        sup_{-tau <= t1 <= t2 <= tau} || sum_{i=m(t(n)+t1)}^{m(t(n)+t2)-1} alpha(i) (g_{i+1} - center) ||_inf

    where ``g_samples[i]`` is ``g`` evaluated at the sample that drives step
    ``i``.  Since the sums are differences of prefix sums, the supremum per
    coordinate is the range (max minus min) of the prefix sums over the index
    window.  ``center`` defaults to the sample mean.  The trend is the OLS
    slope of ``log value`` against ``log n``.
    """
    g = np.asarray(g_samples, dtype=float)
    N = g.shape[0]
    g = g.reshape(N, -1)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    center = g.mean(axis=0) if center is None else np.asarray(center, dtype=float).reshape(-1)
    alphas = schedule.alphas(N) if isinstance(schedule, Schedule) else np.asarray(schedule, dtype=float)[:N]
    part = TimePartition(alphas, T=1.0)
    eval_points = np.asarray(eval_points, dtype=np.int64)
    far = part.t[eval_points] + tau
    if np.any(eval_points >= N) or np.any(far > part.t[-1]):
        bad = int(eval_points[np.argmax((eval_points >= N) | (far > part.t[-1]))])
        need = int(np.searchsorted(part.t, far.max())) if far.max() <= part.t[-1] else None
        raise InsufficientSamplesError(
            f"window around n = {bad} needs samples beyond the {N} available"
            + ("" if need is None else f" (need {need})")
        )
    prefix = np.zeros((N + 1, g.shape[1]))
    np.cumsum(alphas[:, None] * (g - center), axis=0, out=prefix[1:])
    values = np.empty(len(eval_points))
    for j, n in enumerate(eval_points):
        lo = part.m(part.t[n] - tau)
        hi = part.m(part.t[n] + tau)
        window = prefix[lo:hi + 1]
        values[j] = np.max(window.max(axis=0) - window.min(axis=0))
    slope, p_value = float("nan"), float("nan")
    if len(eval_points) >= 3 and np.all(values > 0):
        fit = stats.linregress(np.log(eval_points.astype(float)), np.log(values))
        slope, p_value = float(fit.slope), float(fit.pvalue)
    return RateOfChange(eval_points, values, float(tau), slope, p_value, center)


# -- law of large numbers ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LlnReport:
    checkpoints: np.ndarray
    running_means: np.ndarray
    relative_errors: np.ndarray | None

    @property
    def terminal_mean(self) -> np.ndarray:
        return self.running_means[-1]

    @property
    def terminal_relative_error(self) -> float | None:
        return None if self.relative_errors is None else float(self.relative_errors[-1])

    def to_dict(self) -> dict:
        return _jsonable({
            "checkpoints": self.checkpoints,
            "relative_errors": self.relative_errors,
            "terminal_relative_error": self.terminal_relative_error,
            "terminal_mean": self.terminal_mean,
        })


def lln_check(samples, reference_mean=None, checkpoints=None) -> LlnReport:
    """Running means of ``samples`` at checkpoints, optionally against a reference.

    ``samples`` is an array whose first axis is time, or an iterable of such
    chunks (consumed once, so long chains never need to be held in memory).
    Without explicit checkpoints the means are taken at ``100 * 2**k`` and at
    the last sample.  Relative errors use the Frobenius/Euclidean norm of the
    difference divided by the norm of the reference.
    """
    chunks = [samples] if isinstance(samples, np.ndarray) else samples
    explicit = checkpoints is not None
    if explicit:
        pending = sorted(int(c) for c in checkpoints)
        if pending and pending[0] <= 0:
            raise ValueError(f"checkpoints must be positive, got {pending[0]}")
    else:
        pending = [100 * 2 ** k for k in range(48)]
    total = None
    count = 0
    means, marks = [], []
    for chunk in chunks:
        chunk = np.asarray(chunk, dtype=float)
        if len(chunk) == 0:
            continue
        if total is None:
            total = np.zeros(chunk.shape[1:])
        if pending and pending[0] <= count + len(chunk):
            csum = np.cumsum(chunk, axis=0)
            while pending and pending[0] <= count + len(chunk):
                c = pending.pop(0)
                marks.append(c)
                means.append((total + csum[c - count - 1]) / c)
        total = total + chunk.sum(axis=0)
        count += len(chunk)
    if count < MIN_LLN_SAMPLES:
        raise InsufficientSamplesError(f"need at least {MIN_LLN_SAMPLES} samples, got {count}")
    if explicit and pending:
        raise InsufficientSamplesError(f"checkpoint {pending[0]} beyond the {count} samples seen")
    if not marks or marks[-1] != count:
        marks.append(count)
        means.append(total / count)
    means = np.asarray(means)
    rel = None
    if reference_mean is not None:
        ref = np.asarray(reference_mean, dtype=float)
        scale = np.linalg.norm(ref)
        diffs = np.array([np.linalg.norm(m - ref) for m in means])
        rel = diffs / scale if scale > 0 else diffs
    return LlnReport(np.asarray(marks), means, rel)


# -- stability ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StabilityReport:
    verdict: str
    diverged: bool
    diverged_at: int | None
    overall_max: float
    middle_decile_max: float
    last_decile_max: float
    running_max: np.ndarray = field(repr=False)

    @property
    def tail_ratio(self) -> float:
        """Last-decile max over middle-decile max; near or below 1 when settled."""
        return self.last_decile_max / self.middle_decile_max if self.middle_decile_max > 0 else float("inf")

    def to_dict(self) -> dict:
        return _jsonable({
            "verdict": self.verdict, "diverged": self.diverged, "diverged_at": self.diverged_at,
            "overall_max": self.overall_max, "middle_decile_max": self.middle_decile_max,
            "last_decile_max": self.last_decile_max, "tail_ratio": self.tail_ratio,
        })


def stability_monitor(trajectory, guard: float = OVERFLOW_GUARD) -> StabilityReport:
    """Boundedness verdict from the recorded iterate norms.

    ``bounded-consistent`` when the run never tripped the overflow guard, all
    norms are finite and the last decile's maximum does not exceed the overall
    maximum; ``diverged`` otherwise.  ``trajectory`` is a :class:`Trajectory`
    or a 1-d array of norms.
    """
    if isinstance(trajectory, Trajectory):
        norms = np.asarray(trajectory.norm_x, dtype=float)
        steps = np.asarray(trajectory.steps)
        flagged = trajectory.diverged
        at = trajectory.diverged_at
    else:
        norms = np.asarray(trajectory, dtype=float)
        steps = np.arange(len(norms))
        flagged, at = False, None
    if len(norms) == 0:
        raise ValueError("empty trajectory")
    bad = ~np.isfinite(norms) | (norms > guard)
    if bad.any() and at is None:
        at = int(steps[np.argmax(bad)])
    diverged = bool(flagged or bad.any())
    finite = np.where(np.isfinite(norms), norms, np.inf)
    running = np.maximum.accumulate(finite)
    n = len(norms)
    d = max(1, n // 10)
    mid = finite[max(0, n // 2 - d // 2): max(1, n // 2 - d // 2 + d)]
    last = finite[n - d:]
    overall = float(running[-1])
    bounded = not diverged and np.all(np.isfinite(norms)) and last.max() <= overall
    return StabilityReport(
        verdict="bounded-consistent" if bounded else "diverged",
        diverged=diverged,
        diverged_at=None if at is None else int(at),
        overall_max=overall,
        middle_decile_max=float(mid.max()),
        last_decile_max=float(last.max()),
        running_max=running,
    )


# -- traces --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TraceStatistics:
    quantiles: dict
    running_max: np.ndarray = field(repr=False)
    growth: float
    heavy_tail: bool
    followon_quantiles: dict | None = None

    def to_dict(self) -> dict:
        return _jsonable({
            "quantiles": self.quantiles, "growth": self.growth, "heavy_tail": self.heavy_tail,
            "followon_quantiles": self.followon_quantiles,
            "final_running_max": float(self.running_max[-1]),
        })


def _quantiles(x) -> dict:
    x = np.asarray(x, dtype=float)
    q = np.quantile(x, [0.5, 0.9, 0.99])
    return {"q50": float(q[0]), "q90": float(q[1]), "q99": float(q[2]), "max": float(x.max())}


def trace_statistics(trajectory) -> TraceStatistics:
    """Quantiles and running maximum of ``||e||`` (and of ``F`` for ETD runs).

    ``heavy_tail`` is raised when the running maximum keeps growing over the
    run: its final value exceeds the value after the first tenth of the
    records by more than a factor 1.5.  Bounded traces (e.g. on-policy, where
    ``||e|| <= max ||phi|| / (1 - gamma lambda)``) reach their range early;
    with unbounded traces each new record excursion lifts the maximum by a
    large factor.
    """
    if isinstance(trajectory, Trajectory):
        norms = np.asarray(trajectory.norm_e, dtype=float)
        F = trajectory.F
    else:
        norms = np.asarray(trajectory, dtype=float)
        F = None
    if len(norms) < 2:
        raise ValueError("need at least two recorded trace norms")
    running = np.maximum.accumulate(norms)
    early = running[max(1, len(running) // 10)]
    growth = float(running[-1] / early) if early > 0 else float("inf")
    fq = None
    if F is not None and np.any(np.asarray(F) != 0):
        fq = _quantiles(F)
    return TraceStatistics(
        quantiles=_quantiles(norms),
        running_max=running,
        growth=growth,
        heavy_tail=bool(growth > HEAVY_TAIL_GROWTH),
        followon_quantiles=fq,
    )


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
