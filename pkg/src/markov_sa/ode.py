"""ODE-method constructions over recorded SA trajectories.

Time is partitioned by the step sizes, ``t(n) = alpha(0) + ... + alpha(n-1)``,
and grouped into segments ``[T_n, T_{n+1})`` of length at least ``T``.  On each
segment the piecewise-constant interpolation of the iterates is rescaled by
``r_n = max(1, ||x(T_n)||)`` and compared with the solution of the mean ODE
``dz/dt = h_{r_n}(z)`` started from the same point.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .learners import Schedule

PROBE_THRESHOLD = 0.25
ODE_TOL = 1e-9


class OdeError(RuntimeError):
    pass


# -- time partition -------------------------------------------------------------


class TimePartition:
    """Knots ``t(0..N)`` of a step-size sequence and its segment boundaries."""

    def __init__(self, alphas, T: float):
        alphas = np.asarray(alphas, dtype=float)
        if T <= 0:
            raise ValueError(f"T must be positive, got {T}")
        if alphas.ndim != 1 or np.any(alphas <= 0):
            raise ValueError("step sizes must be a positive 1-d sequence")
        self.alphas = alphas
        self.T = float(T)
        self.t = np.concatenate([[0.0], np.cumsum(alphas)])
        self.segment_starts = self._segment_starts()

    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    @property
    def n_knots(self) -> int:
        return len(self.t)

    def m(self, time):
        """Largest ``i`` with ``t(i) <= time``; 0 for ``time <= 0``."""
        time_arr = np.asarray(time, dtype=float)
        if np.any(time_arr > self.t[-1]):
            raise ValueError(f"time {np.max(time_arr)} beyond the partition horizon {self.t[-1]}")
        idx = np.searchsorted(self.t, time_arr, side="right") - 1
        idx = np.where(time_arr <= 0.0, 0, idx)
        return int(idx) if np.ndim(time) == 0 else idx

    def _segment_starts(self) -> np.ndarray:
        # T_0 = 0, T_{n+1} = t(m(T_n + T) + 1); keep T_n only while the
        # whole of [T_n, T_n + T) lies inside the recorded knots
        starts = [0]
        while True:
            end = self.t[starts[-1]] + self.T
            if end >= self.t[-1]:
                break
            nxt = self.m(end) + 1
            if nxt >= len(self.t):
                break
            starts.append(nxt)
        return np.asarray(starts, dtype=np.int64)

    @property
    def T_n(self) -> np.ndarray:
        return self.t[self.segment_starts]

    def complete_segments(self) -> int:
        """Number of segments ``n`` for which ``[T_n, T_n + T)`` is recorded."""
        return int(np.sum(self.T_n + self.T <= self.t[-1]))

    def window_sum(self, n: int, t1: float, t2: float) -> float:
        """``sum_{i=m(t(n)+t1)}^{m(t(n)+t2)-1} alpha(i)``."""
        lo = self.m(self.t[n] + t1)
        hi = self.m(self.t[n] + t2)
        return float(self.t[hi] - self.t[lo])


def build_partition(schedule, T: float, horizon_n: int) -> TimePartition:
    """Partition for ``horizon_n`` steps of ``schedule``.

    ``schedule`` may also be an explicit array of step sizes, e.g. a constant
    sequence for testing.
    """
    if isinstance(schedule, Schedule):
        alphas = schedule.alphas(horizon_n)
    else:
        alphas = np.broadcast_to(np.asarray(schedule, dtype=float), (horizon_n,))
    return TimePartition(alphas, T)


# -- interpolation and scaling --------------------------------------------------


class InterpolatedPath:
    """Right-continuous step function ``xbar(t) = x_{m(t)}`` of recorded iterates."""

    def __init__(self, iterates, partition: TimePartition):
        iterates = np.asarray(iterates, dtype=float)
        if iterates.ndim == 1:
            iterates = iterates[:, None]
        if len(iterates) > partition.n_knots:
            raise ValueError(f"{len(iterates)} iterates but only {partition.n_knots} knots")
        self.iterates = iterates
        self.partition = partition

    @property
    def horizon(self) -> float:
        return float(self.partition.t[len(self.iterates) - 1])

    def __call__(self, t):
        return interpolate(self, t)


def interpolate(path: InterpolatedPath, t):
    if np.any(np.asarray(t) > path.horizon):
        raise ValueError(f"t = {np.max(t)} beyond the recorded horizon {path.horizon}")
    return path.iterates[path.partition.m(t)]


@dataclass(frozen=True, eq=False)
class ScaledSegment:
    n: int
    start: int
    r: float
    indices: np.ndarray
    times: np.ndarray
    values: np.ndarray

    def unscaled(self) -> np.ndarray:
        return self.values * self.r


def scaled_segment(path: InterpolatedPath, n: int) -> ScaledSegment:
    """``xhat(T_n + t) = xbar(T_n + t) / r_n`` on the knots of ``[T_n, T_n + T)``."""
    part = path.partition
    if n >= len(part.segment_starts):
        raise ValueError(f"segment {n} does not exist (only {len(part.segment_starts)})")
    k0 = int(part.segment_starts[n])
    T_n = part.t[k0]
    if T_n + part.T > path.horizon:
        raise ValueError(f"segment {n} is not fully recorded")
    k1 = int(np.searchsorted(part.t, T_n + part.T, side="left"))
    idx = np.arange(k0, k1)
    r = max(1.0, float(np.linalg.norm(path.iterates[k0])))
    return ScaledSegment(
        n=n, start=k0, r=r, indices=idx, times=part.t[idx] - T_n, values=path.iterates[idx] / r,
    )


# -- fields -----------------------------------------------------------------------


class Scale(enum.Enum):
    INFINITY = "infinity"


AT_INFINITY = Scale.INFINITY


class LinearField:
    """``h(x) = M x + c``; acts column-wise on stacked states."""

    def __init__(self, M, c=None, field_id: str = "linear"):
        self.M = np.asarray(M, dtype=float)
        self.c = np.zeros(self.M.shape[0]) if c is None else np.asarray(c, dtype=float)
        self.field_id = field_id

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return self.M @ x + self.c[:, None]
        return self.M @ x + self.c

    def __neg__(self) -> "LinearField":
        return LinearField(-self.M, -self.c, f"-{self.field_id}")


class _ScaledCallable:
    def __init__(self, h, c):
        self.h = h
        self.c = c
        self.field_id = f"{getattr(h, 'field_id', 'h')}@c={c:g}"

    def __call__(self, x):
        return np.asarray(self.h(self.c * np.asarray(x, dtype=float))) / self.c


def scaled_field(h, c):
    """``h_c(x) = h(c x) / c``; ``c = AT_INFINITY`` gives the limit ``h_inf``.

    Linear fields scale in closed form (``M x + b / c``).  Other callables can
    be scaled by finite ``c`` only, unless they provide an ``at_infinity``
    method.
    """
    if c is AT_INFINITY:
        if isinstance(h, LinearField):
            return LinearField(h.M, None, f"{h.field_id}@inf")
        if hasattr(h, "at_infinity"):
            return h.at_infinity()
        raise ValueError("the limit field is only known for linear fields")
    c = float(c)
    if not c >= 1.0:
        raise ValueError(f"scale c must be >= 1, got {c}")
    if c == 1.0:
        return h
    if isinstance(h, LinearField):
        return LinearField(h.M, h.c / c, f"{h.field_id}@c={c:g}")
    return _ScaledCallable(h, c)


# -- Dormand-Prince 5(4) -----------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# difference between the 5th- and embedded 4th-order weights (7 stages, FSAL)
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# Shampine's quartic continuous extension
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


@dataclass(frozen=True, eq=False)
class OdeSolution:
    grid: np.ndarray
    values: np.ndarray
    field_id: str = ""
    n_steps: int = 0
    stopped_early: bool = False


def _error_norm(err, y0, y1, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def solve_ode(
    field: Callable,
    x0,
    grid,
    tol: float = ODE_TOL,
    rtol: float | None = None,
    max_steps: int = 1_000_000,
    blowup: float | None = None,
) -> OdeSolution:
    """Integrate ``dz/dt = field(z)`` from ``z(grid[0]) = x0`` with a DOPRI5 pair.

    ``grid`` is either a final time ``T`` (output at ``[0, T]``) or an
    increasing array of output times; outputs between accepted steps come from
    the 4th-order continuous extension, so a dense grid costs no extra steps.
    ``x0`` may be 2-d (one initial condition per column) when ``field`` acts
    column-wise.  With ``blowup`` set, integration stops once any entry exceeds
    it and later outputs are NaN.
    """
    if np.ndim(grid) == 0:
        grid = np.array([0.0, float(grid)])
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be a non-decreasing 1-d array")
    rtol = tol if rtol is None else rtol
    y = np.array(x0, dtype=float)
    out = np.full((len(grid),) + y.shape, np.nan)
    out[0] = y
    t, t_end = grid[0], grid[-1]
    j = 1
    while j < len(grid) and grid[j] <= t:
        out[j] = y
        j += 1
    f = np.asarray(field(y), dtype=float)
    span = t_end - t
    if span == 0.0:
        return OdeSolution(grid, out, getattr(field, "field_id", ""), 0)
    scale0 = tol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale0) ** 2))
    d1 = np.sqrt(np.mean((f / scale0) ** 2))
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h, span)
    h_min = 1e-14 * max(1.0, abs(t_end))
    K = np.empty((7,) + y.shape)
    steps = 0
    while j < len(grid):
        if steps >= max_steps:
            raise OdeError(f"exceeded {max_steps} steps at t = {t}")
        h = min(h, t_end - t)
        if h < h_min:
            raise OdeError(f"step size underflow at t = {t} (h = {h:.3e})")
        K[0] = f
        for s in range(1, 6):
            dy = sum(a * K[i] for i, a in enumerate(_A[s]))
            K[s] = field(y + h * dy)
        y_new = y + h * np.tensordot(_B, K[:6], axes=1)
        K[6] = field(y_new)
        err = h * np.tensordot(_E, K, axes=1)
        en = _error_norm(err, y, y_new, tol, rtol)
        if en <= 1.0:
            t_new = t + h
            Q = np.tensordot(_P, K, axes=([0], [0]))  # (4,) + shape
            while j < len(grid) and grid[j] <= t_new:
                x = (grid[j] - t) / h
                powers = np.array([x, x * x, x ** 3, x ** 4])
                out[j] = y + h * np.tensordot(powers, Q, axes=1)
                j += 1
            t, y, f = t_new, y_new, K[6].copy()
            steps += 1
            if blowup is not None and np.max(np.abs(y)) > blowup:
                return OdeSolution(grid, out, getattr(field, "field_id", ""), steps, True)
            factor = 5.0 if en == 0.0 else min(5.0, 0.9 * en ** -0.2)
        else:
            factor = max(0.2, 0.9 * en ** -0.2)
        h *= factor
    return OdeSolution(grid, out, getattr(field, "field_id", ""), steps)


# -- discretisation error -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ErrorCurve:
    n: int
    times: np.ndarray
    values: np.ndarray

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)

    @property
    def sup_norm(self) -> float:
        return float(np.max(self.norms))


def discretization_error(segment: ScaledSegment, ode: OdeSolution) -> ErrorCurve:
    """``f_n(t) = xhat(T_n + t) - z_n(t)`` on the segment's knots."""
    if ode.grid.shape != segment.times.shape or np.any(np.abs(ode.grid - segment.times) > 1e-12):
        raise ValueError("ODE grid does not match the segment's time points")
    return ErrorCurve(n=segment.n, times=segment.times, values=segment.values - ode.values)


def segment_ode(path: InterpolatedPath, n: int, field, tol: float = ODE_TOL):
    """The scaled segment ``n`` and the ODE solution ``z_n`` on its knots."""
    seg = scaled_segment(path, n)
    z = solve_ode(scaled_field(field, seg.r), seg.values[0], seg.times, tol=tol)
    return seg, z


def tracking_errors(path: InterpolatedPath, field, segments=None, tol: float = ODE_TOL) -> np.ndarray:
    """``sup_t ||f_n(t)||`` for each complete segment (or the given ones)."""
    if segments is None:
        segments = range(path.partition.complete_segments())
    sups = []
    for n in segments:
        seg, z = segment_ode(path, n, field, tol)
        sups.append(discretization_error(seg, z).sup_norm)
    return np.asarray(sups)


# -- ODE at infinity ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProbeResult:
    verdict: str
    T_probe: float
    terminal_norms: np.ndarray
    tau: float | None
    threshold: float = PROBE_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "T_probe": self.T_probe,
            "threshold": self.threshold,
            "tau": self.tau,
            "max_terminal_norm": float(np.nanmax(self.terminal_norms)) if len(self.terminal_norms) else None,
        }


def ode_at_infinity_probe(
    h_inf,
    n_dirs: int = 32,
    T_probe: float = 10.0,
    seed: int = 0,
    dim: int | None = None,
    threshold: float = PROBE_THRESHOLD,
    n_grid: int = 2001,
) -> ProbeResult:
    """Integrate ``dz/dt = h_inf(z)`` from random unit vectors over ``[0, T_probe]``.

    ``consistent`` when every terminal norm is at most ``threshold``;
    ``inconsistent`` when some trajectory ends with norm >= 1 (no decay at
    all); ``inconclusive`` otherwise.  ``tau`` is the first time after which the
    largest norm stays at or below the threshold, refined by log-linear
    interpolation between grid points.
    """
    if dim is None:
        dim = getattr(h_inf, "dim", None)
        if dim is None:
            raise ValueError("dim is required for fields without a .dim attribute")
    rng = np.random.Generator(np.random.PCG64(seed))
    X0 = rng.standard_normal((dim, n_dirs))
    X0 /= np.linalg.norm(X0, axis=0)
    grid = np.linspace(0.0, T_probe, n_grid)
    if isinstance(h_inf, LinearField):
        field = h_inf
    else:
        def field(X):
            return np.column_stack([h_inf(X[:, i]) for i in range(X.shape[1])])
    sol = solve_ode(field, X0, grid, blowup=1e8)
    norms = np.linalg.norm(sol.values, axis=1)  # (n_grid, n_dirs)
    worst = np.max(np.where(np.isnan(norms), np.inf, norms), axis=1)
    terminal = norms[-1]
    if sol.stopped_early or np.any(~np.isfinite(terminal)):
        return ProbeResult("inconsistent", T_probe, terminal, None, threshold)
    below = worst <= threshold
    tau = None
    if below[-1]:
        above = np.flatnonzero(~below)
        k = 0 if len(above) == 0 else int(above[-1]) + 1
        tau = float(grid[k])
        if k > 0:
            la, lb = np.log(worst[k - 1]), np.log(worst[k])
            frac = (la - np.log(threshold)) / (la - lb) if la != lb else 1.0
            tau = float(grid[k - 1] + frac * (grid[k] - grid[k - 1]))
        verdict = "consistent"
    elif np.any(terminal >= 1.0):
        verdict = "inconsistent"
    else:
        verdict = "inconclusive"
    return ProbeResult(verdict, T_probe, terminal, tau, threshold)
