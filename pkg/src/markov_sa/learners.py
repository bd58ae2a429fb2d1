"""TD(lambda), off-policy TD(lambda), GTD(lambda) and ETD(lambda) learners.

Every learner is an instance of the generic stochastic-approximation update
``x_{n+1} = x_n + alpha(n) H(x_n, Y_{n+1})``.  The step functions here are pure:
they take a state and a sample and return a new state.  :func:`run` drives long
trajectories through a compiled loop that performs the same arithmetic.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import _kernels
from .mdp import FiniteMdp, Policy, importance_ratios

OVERFLOW_GUARD = 1e12
DEFAULT_STRIDE = 100
GENERATOR_NAME = "numpy.random.PCG64"
CHUNK = 1 << 18

ALGORITHMS = ("td", "offpolicy_td", "gtd", "etd")


class LearnerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Learning rates ``alpha(n) = B1 / (n + B2) ** beta``."""

    B1: float
    B2: float
    beta: float = 1.0

    def __post_init__(self):
        if not self.B1 > 0:
            raise ValueError(f"B1 must be positive, got {self.B1}")
        if not self.B2 > 0:
            raise ValueError(f"B2 must be positive, got {self.B2}")
        if not 0.5 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0.5, 1], got {self.beta}")

    def alpha(self, n):
        """``alpha(n)``; accepts scalars or arrays of step indices."""
        if np.ndim(n):
            return self.B1 / (np.asarray(n, dtype=float) + self.B2) ** self.beta
        return self.B1 / (n + self.B2) ** self.beta

    def alphas(self, n: int) -> np.ndarray:
        """``alpha(0), ..., alpha(n - 1)``."""
        return self.B1 / (np.arange(n, dtype=float) + self.B2) ** self.beta

    def decrement_constant(self) -> float:
        """A ``c`` with ``(alpha(n) - alpha(n+1)) / alpha(n) <= c alpha(n)`` for all n >= 0.

        ``1 - ((n+B2)/(n+1+B2))**beta <= 1/(n+B2)`` for ``beta <= 1`` and
        ``1/(n+B2) = alpha(n) (n+B2)**(beta-1) / B1``, maximal at ``n = 0``.
        """
        return self.B2 ** (self.beta - 1.0) / self.B1


def alpha(schedule: Schedule, n: int) -> float:
    return schedule.B1 / (n + schedule.B2) ** schedule.beta


# -- samples and states ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AugmentedSample:
    """The ``(S_t, A_t, S_{t+1})`` part of ``Y_{t+1}`` plus what the updates read."""

    s: int
    a: int
    s_next: int
    rho: float
    reward: float
    phi: np.ndarray
    phi_next: np.ndarray


@dataclass(frozen=True, eq=False)
class TdState:
    theta: np.ndarray
    e: np.ndarray
    rho_prev: float = 1.0
    diverged: bool = False

    @classmethod
    def initial(cls, K: int, theta0=None) -> "TdState":
        theta = np.zeros(K) if theta0 is None else np.array(theta0, dtype=float)
        return cls(theta=theta, e=np.zeros(K))

    @property
    def x(self) -> np.ndarray:
        return self.theta


@dataclass(frozen=True, eq=False)
class GtdState:
    theta: np.ndarray
    nu: np.ndarray
    e: np.ndarray
    rho_prev: float = 1.0
    diverged: bool = False

    @classmethod
    def initial(cls, K: int, theta0=None, nu0=None) -> "GtdState":
        theta = np.zeros(K) if theta0 is None else np.array(theta0, dtype=float)
        nu = np.zeros(K) if nu0 is None else np.array(nu0, dtype=float)
        return cls(theta=theta, nu=nu, e=np.zeros(K))

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.nu, self.theta])


@dataclass(frozen=True, eq=False)
class EtdState:
    theta: np.ndarray
    e: np.ndarray
    F: float = 0.0
    M: float = 0.0
    rho_prev: float = 1.0
    diverged: bool = False

    @classmethod
    def initial(cls, K: int, theta0=None) -> "EtdState":
        theta = np.zeros(K) if theta0 is None else np.array(theta0, dtype=float)
        return cls(theta=theta, e=np.zeros(K))

    @property
    def x(self) -> np.ndarray:
        return self.theta


def _cumulative(probs: np.ndarray) -> np.ndarray:
    return np.cumsum(probs, axis=-1)


def _draw(cum: np.ndarray, u: float) -> int:
    i = int(np.searchsorted(cum, u, side="right"))
    if i < len(cum):
        return i
    nz = np.flatnonzero(np.diff(np.concatenate([[0.0], cum])) > 0)
    return int(nz[-1])


def sample_transition(
    mdp: FiniteMdp,
    mu: Policy,
    rng: np.random.Generator,
    s: int,
    pi: Policy | None = None,
    features=None,
) -> AugmentedSample:
    """Draw ``A ~ mu(.|s)`` then ``S' ~ p(.|s, A)``.

    Consumes exactly two uniforms from ``rng`` (action first), which is the
    same stream layout :func:`run` uses.
    """
    if not 0 <= s < mdp.n_states:
        raise ValueError(f"state {s} out of range")
    u = rng.random(2)
    a = _draw(_cumulative(mu.probs[s]), u[0])
    s_next = _draw(_cumulative(mdp.transition[s, a]), u[1])
    if pi is None:
        rho = 1.0
    else:
        rho = float(pi.probs[s, a] / mu.probs[s, a])
    if features is None:
        phi = phi_next = np.zeros(0)
    else:
        Phi = np.asarray(features, dtype=float)
        phi, phi_next = Phi[s], Phi[s_next]
    return AugmentedSample(
        s=s, a=a, s_next=s_next, rho=rho, reward=float(mdp.reward[s, a]), phi=phi, phi_next=phi_next
    )


def _guarded(state, *arrays):
    if all(np.all(np.abs(x) <= OVERFLOW_GUARD) for x in arrays):
        return state
    return replace(state, diverged=True)


def _td_error(sample: AugmentedSample, theta: np.ndarray, gamma: float) -> float:
    return sample.reward + gamma * (sample.phi_next @ theta) - sample.phi @ theta


def on_policy_td_step(state: TdState, sample: AugmentedSample, alpha_n: float, gamma: float, lam: float) -> TdState:
    if state.diverged:
        return state
    e = lam * gamma * state.e + sample.phi
    theta = state.theta + alpha_n * _td_error(sample, state.theta, gamma) * e
    return _guarded(TdState(theta=theta, e=e, rho_prev=1.0), theta)


def off_policy_td_step(state: TdState, sample: AugmentedSample, alpha_n: float, gamma: float, lam: float) -> TdState:
    if state.diverged:
        return state
    e = lam * gamma * state.rho_prev * state.e + sample.phi
    theta = state.theta + alpha_n * sample.rho * _td_error(sample, state.theta, gamma) * e
    return _guarded(TdState(theta=theta, e=e, rho_prev=sample.rho), theta)


def gtd_step(state: GtdState, sample: AugmentedSample, alpha_n: float, gamma: float, lam: float) -> GtdState:
    if state.diverged:
        return state
    e = lam * gamma * state.rho_prev * state.e + sample.phi
    delta = _td_error(sample, state.theta, gamma)
    phi, phi_next, rho = sample.phi, sample.phi_next, sample.rho
    nu = state.nu + alpha_n * (rho * delta * e - phi * (phi @ state.nu))
    theta = state.theta + alpha_n * rho * (phi - gamma * phi_next) * (e @ state.nu)
    return _guarded(GtdState(theta=theta, nu=nu, e=e, rho_prev=rho), theta, nu)


def gtd_block_H(x: np.ndarray, sample: AugmentedSample, e: np.ndarray, gamma: float) -> np.ndarray:
    """``H(x, y)`` of GTD(lambda) in block form, ``x = [nu; theta]``.

    ``e`` must already be the trace of the current step.
    """
    phi, phi_next, rho = sample.phi, sample.phi_next, sample.rho
    K = phi.shape[0]
    A_y = rho * np.outer(e, gamma * phi_next - phi)
    C_y = np.outer(phi, phi)
    b_y = rho * sample.reward * e
    G = np.block([[-C_y, A_y], [-A_y.T, np.zeros((K, K))]])
    return G @ x + np.concatenate([b_y, np.zeros(K)])


def etd_step(
    state: EtdState, sample: AugmentedSample, alpha_n: float, gamma: float, lam: float, interest
) -> EtdState:
    """One ETD(lambda) step; ``interest`` is ``i(S_t)`` or a per-state array."""
    if state.diverged:
        return state
    i_s = float(interest[sample.s]) if np.ndim(interest) else float(interest)
    F = gamma * state.rho_prev * state.F + i_s
    M = lam * i_s + (1.0 - lam) * F
    e = lam * gamma * state.rho_prev * state.e + M * sample.phi
    theta = state.theta + alpha_n * sample.rho * _td_error(sample, state.theta, gamma) * e
    return _guarded(EtdState(theta=theta, e=e, F=F, M=M, rho_prev=sample.rho), theta)


# -- long runs ---------------------------------------------------------------


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str
    lam: float
    interest: tuple | None = None
    theta0: tuple | None = None
    nu0: tuple | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise LearnerConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not 0.0 <= self.lam <= 1.0:
            raise LearnerConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.interest is not None and self.algorithm != "etd":
            raise LearnerConfigError("an interest function only applies to etd")
        if self.nu0 is not None and self.algorithm != "gtd":
            raise LearnerConfigError("nu0 only applies to gtd")


@dataclass(eq=False)
class Trajectory:
    """Strided record of a run.

    Row ``j`` describes iterate ``x_n`` with ``n = steps[j]``: ``alpha`` is
    ``alpha(n)``, ``norm_e`` and ``F`` are those of the trace that produced
    ``x_n`` (zero for ``n = 0``).
    """

    algorithm: str
    steps: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    norm_x: np.ndarray
    norm_e: np.ndarray
    nu: np.ndarray | None = None
    F: np.ndarray | None = None
    diverged: bool = False
    diverged_at: int | None = None
    seed: int | None = None
    generator: str = GENERATOR_NAME
    final_state: object = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.theta.shape[1]

    @property
    def iterates(self) -> np.ndarray:
        if self.nu is not None:
            return np.hstack([self.nu, self.theta])
        return self.theta

    def header(self) -> list[str]:
        cols = ["step", "alpha"] + [f"theta_{k}" for k in range(self.K)]
        if self.nu is not None:
            cols += [f"nu_{k}" for k in range(self.K)]
        cols += ["norm_x", "norm_e"]
        if self.F is not None:
            cols.append("F")
        cols.append("diverged")
        return cols

    def rows(self) -> Iterator[list[str]]:
        last = len(self.steps) - 1
        for j in range(len(self.steps)):
            row = [str(int(self.steps[j])), fmt(self.alpha[j])]
            row += [fmt(v) for v in self.theta[j]]
            if self.nu is not None:
                row += [fmt(v) for v in self.nu[j]]
            row += [fmt(self.norm_x[j]), fmt(self.norm_e[j])]
            if self.F is not None:
                row.append(fmt(self.F[j]))
            row.append("1" if (self.diverged and j == last) else "0")
            yield row

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            w.writerows(self.rows())


def fmt(x: float) -> str:
    """Round-trippable float formatting (17 significant digits)."""
    return format(float(x), ".17g")


def _initial_state(cfg: LearnerConfig, K: int):
    if cfg.algorithm == "gtd":
        return GtdState.initial(K, cfg.theta0, cfg.nu0)
    if cfg.algorithm == "etd":
        return EtdState.initial(K, cfg.theta0)
    return TdState.initial(K, cfg.theta0)


def _sampling_tables(cfg_algorithm: str, mdp: FiniteMdp, pi: Policy, mu: Policy):
    behaviour = pi if cfg_algorithm == "td" else mu
    rho = np.ones((mdp.n_states, mdp.n_actions)) if cfg_algorithm == "td" else importance_ratios(pi, mu)
    return _cumulative(behaviour.probs), _cumulative(mdp.transition), rho


def _interest_vector(interest, n_states: int) -> np.ndarray:
    if interest is None:
        return np.ones(n_states)
    return np.broadcast_to(np.asarray(interest, dtype=float), (n_states,)).copy()


def _algorithm_code(name: str) -> int:
    return {"td": _kernels.TD, "offpolicy_td": _kernels.TD, "gtd": _kernels.GTD, "etd": _kernels.ETD}[name]


def run(
    cfg: LearnerConfig,
    mdp: FiniteMdp,
    pi: Policy,
    mu: Policy,
    features,
    schedule: Schedule,
    n_steps: int,
    seed: int,
    stride: int = DEFAULT_STRIDE,
) -> Trajectory:
    """Iterate a learner for ``n_steps`` steps from a seeded ``PCG64`` stream.

    The initial state ``S_0 ~ p0`` takes one uniform; every step then takes two
    (action, next state).  ``td`` samples actions from ``pi`` with ``rho = 1``;
    the off-policy algorithms sample from ``mu``.  Recording happens at step 0,
    every ``stride`` steps, at the final step and when the overflow guard
    trips, after which the run is frozen.
    """
    if n_steps < 0:
        raise LearnerConfigError("n_steps must be non-negative")
    if stride < 1:
        raise LearnerConfigError("stride must be >= 1")
    Phi = np.ascontiguousarray(features, dtype=float)
    if Phi.shape[0] != mdp.n_states:
        raise LearnerConfigError(f"features have {Phi.shape[0]} rows for {mdp.n_states} states")
    K = Phi.shape[1]
    for name, vec in (("theta0", cfg.theta0), ("nu0", cfg.nu0)):
        if vec is not None and len(vec) != K:
            raise LearnerConfigError(f"{name} has length {len(vec)}, expected {K}")
    mu_cum, p_cum, rho_tab = _sampling_tables(cfg.algorithm, mdp, pi, mu)
    interest = _interest_vector(cfg.interest, mdp.n_states)
    if np.any(interest <= 0):
        raise LearnerConfigError("interest must be strictly positive")

    rng = np.random.Generator(np.random.PCG64(seed))
    s = _draw(_cumulative(mdp.initial_dist), rng.random())
    state = _initial_state(cfg, K)
    theta = state.theta.copy()
    nu = state.nu.copy() if cfg.algorithm == "gtd" else np.zeros(K)
    e = state.e.copy()
    f, rho_prev = 0.0, 1.0

    cap = n_steps // stride + 3
    rec_step = np.zeros(cap, dtype=np.int64)
    rec_alpha = np.zeros(cap)
    rec_theta = np.zeros((cap, K))
    rec_nu = np.zeros((cap, K))
    rec_nx = np.zeros(cap)
    rec_ne = np.zeros(cap)
    rec_f = np.zeros(cap)
    rec_step[0] = 0
    rec_alpha[0] = schedule.alpha(0)
    rec_theta[0] = theta
    rec_nu[0] = nu
    rec_nx[0] = np.linalg.norm(np.concatenate([nu, theta]) if cfg.algorithm == "gtd" else theta)
    n_rec = 1

    code = _algorithm_code(cfg.algorithm)
    diverged_at = -1
    done = 0
    while done < n_steps and diverged_at < 0:
        c = min(CHUNK, n_steps - done)
        u = rng.random((c, 2))
        s, f, rho_prev, n_rec, diverged_at = _kernels.run_chunk(
            code, mu_cum, p_cum, rho_tab, mdp.reward, Phi, interest, mdp.gamma, cfg.lam,
            schedule.B1, schedule.B2, schedule.beta, done, u,
            s, theta, nu, e, f, rho_prev,
            stride, rec_step, rec_alpha, rec_theta, rec_nu, rec_nx, rec_ne, rec_f, n_rec,
            OVERFLOW_GUARD,
        )
        done += c
    last_step = diverged_at if diverged_at >= 0 else n_steps
    if rec_step[n_rec - 1] != last_step:
        rec_step[n_rec] = last_step
        rec_alpha[n_rec] = schedule.alpha(last_step)
        rec_theta[n_rec] = theta
        rec_nu[n_rec] = nu
        rec_nx[n_rec] = np.linalg.norm(np.concatenate([nu, theta]) if cfg.algorithm == "gtd" else theta)
        rec_ne[n_rec] = np.linalg.norm(e)
        rec_f[n_rec] = f
        n_rec += 1

    diverged = diverged_at >= 0
    if cfg.algorithm == "gtd":
        final = GtdState(theta=theta, nu=nu, e=e, rho_prev=rho_prev, diverged=diverged)
    elif cfg.algorithm == "etd":
        final = EtdState(theta=theta, e=e, F=f, M=0.0, rho_prev=rho_prev, diverged=diverged)
    else:
        final = TdState(theta=theta, e=e, rho_prev=rho_prev, diverged=diverged)
    sl = slice(0, n_rec)
    return Trajectory(
        algorithm=cfg.algorithm,
        steps=rec_step[sl].copy(),
        alpha=rec_alpha[sl].copy(),
        theta=rec_theta[sl].copy(),
        nu=rec_nu[sl].copy() if cfg.algorithm == "gtd" else None,
        norm_x=rec_nx[sl].copy(),
        norm_e=rec_ne[sl].copy(),
        F=rec_f[sl].copy() if cfg.algorithm == "etd" else None,
        diverged=diverged,
        diverged_at=diverged_at if diverged else None,
        seed=seed,
        final_state=final,
    )


def iter_update_terms(
    algorithm: str,
    mdp: FiniteMdp,
    pi: Policy,
    mu: Policy,
    features,
    lam: float,
    n_steps: int,
    seed: int,
    interest=None,
    chunk: int = CHUNK,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield chunks of ``(A(Y_t), b(Y_t), C(Y_t))`` along the augmented chain.

    Uses the same random stream as :func:`run` with the same ``seed``, so the
    samples are exactly those a learner run would have seen.
    """
    if algorithm not in ("gtd", "etd", "offpolicy_td", "td"):
        raise LearnerConfigError(f"unknown algorithm {algorithm!r}")
    Phi = np.ascontiguousarray(features, dtype=float)
    K = Phi.shape[1]
    mu_cum, p_cum, rho_tab = _sampling_tables(algorithm, mdp, pi, mu)
    interest = _interest_vector(interest, mdp.n_states)
    code = _algorithm_code(algorithm)
    rng = np.random.Generator(np.random.PCG64(seed))
    s = _draw(_cumulative(mdp.initial_dist), rng.random())
    e = np.zeros(K)
    f, rho_prev = 0.0, 1.0
    done = 0
    while done < n_steps:
        c = min(chunk, n_steps - done)
        u = rng.random((c, 2))
        out_a = np.empty((c, K, K))
        out_b = np.empty((c, K))
        out_c = np.empty((c, K, K))
        s, f, rho_prev = _kernels.trace_terms_chunk(
            code, mu_cum, p_cum, rho_tab, mdp.reward, Phi, interest, mdp.gamma, lam, u,
            s, e, f, rho_prev, out_a, out_b, out_c,
        )
        done += c
        yield out_a, out_b, out_c


def simulate_reference(
    cfg: LearnerConfig,
    mdp: FiniteMdp,
    pi: Policy,
    mu: Policy,
    features,
    schedule: Schedule,
    n_steps: int,
    seed: int,
) -> list:
    """Pure-Python counterpart of :func:`run` returning every state.

    Slow; meant for cross-checking the compiled loop on short horizons.
    """
    Phi = np.asarray(features, dtype=float)
    behaviour = pi if cfg.algorithm == "td" else mu
    rng = np.random.Generator(np.random.PCG64(seed))
    s = _draw(_cumulative(mdp.initial_dist), rng.random())
    state = _initial_state(cfg, Phi.shape[1])
    interest = _interest_vector(cfg.interest, mdp.n_states)
    states = [state]
    for n in range(n_steps):
        sample = sample_transition(mdp, behaviour, rng, s, None if cfg.algorithm == "td" else pi, Phi)
        a_n = alpha(schedule, n)
        if cfg.algorithm == "td":
            state = on_policy_td_step(state, sample, a_n, mdp.gamma, cfg.lam)
        elif cfg.algorithm == "offpolicy_td":
            state = off_policy_td_step(state, sample, a_n, mdp.gamma, cfg.lam)
        elif cfg.algorithm == "gtd":
            state = gtd_step(state, sample, a_n, mdp.gamma, cfg.lam)
        else:
            state = etd_step(state, sample, a_n, mdp.gamma, cfg.lam, interest)
        states.append(state)
        if state.diverged:
            break
        s = sample.s_next
    return states


def trace_bound_on_policy(features, gamma: float, lam: float) -> float:
    """``max_s ||phi(s)|| / (1 - lambda gamma)``: bound on on-policy traces."""
    if lam * gamma >= 1.0:
        return math.inf
    return float(np.max(np.linalg.norm(np.asarray(features, dtype=float), axis=1)) / (1.0 - lam * gamma))
