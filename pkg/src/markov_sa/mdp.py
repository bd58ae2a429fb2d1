"""Finite MDPs, policies, induced chains and the lambda-Bellman operator.

Array conventions used throughout the package:

* ``transition[s, a, s']`` is ``p(s' | s, a)``
* ``reward[s, a]`` is ``r(s, a)``
* ``policy.probs[s, a]`` is ``pi(a | s)``
* ``features[s, k]`` is the k-th feature of state ``s`` (rows are ``phi(s)``)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_ATOL = 1e-12
SOLVE_RTOL = 1e-10
MIN_WEIGHT = 1e-12


class MdpError(ValueError):
    """Base class for invalid MDP / policy / feature inputs."""


class DimensionError(MdpError):
    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on {axis}: expected {expected}, got {got}")


class CoverageError(MdpError):
    """Behaviour policy assigns zero probability to a state-action pair."""

    def __init__(self, s: int, a: int):
        self.state = s
        self.action = a
        super().__init__(f"behaviour policy has mu(a={a}|s={s}) = 0")


class RankDeficientError(MdpError):
    def __init__(self, column: int, rank: int):
        self.column = column
        self.rank = rank
        super().__init__(
            f"feature matrix is not full column rank (rank {rank}); "
            f"column {column} is linearly dependent on earlier columns"
        )


class StationaryDistributionError(RuntimeError):
    """The chain has no unique stationary distribution (reducible)."""

    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


def _as_float_array(x, ndim: int, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(f"{name}.ndim", ndim, arr.ndim)
    if not np.all(np.isfinite(arr)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise MdpError(f"{name} has a non-finite entry at index {idx}")
    arr.setflags(write=False)
    return arr


def _check_distribution_rows(arr: np.ndarray, name: str, index_names: tuple[str, ...]) -> None:
    if np.any(arr < 0):
        idx = tuple(int(i) for i in np.argwhere(arr < 0)[0])
        where = ", ".join(f"{n}={i}" for n, i in zip(index_names, idx))
        raise MdpError(f"{name} has a negative probability at ({where})")
    sums = arr.sum(axis=-1)
    bad = np.abs(sums - 1.0) > PROB_ATOL
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        where = ", ".join(f"{n}={i}" for n, i in zip(index_names, idx))
        raise MdpError(f"{name} row ({where}) sums to {float(sums[idx]):.15g}, not 1")


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray

    def __post_init__(self):
        p = _as_float_array(self.transition, 3, "transition")
        if p.shape[0] != p.shape[2]:
            raise DimensionError("transition next-state axis", p.shape[0], p.shape[2])
        n_s, n_a = p.shape[:2]
        if n_s < 1 or n_a < 1:
            raise MdpError("an MDP needs at least one state and one action")
        _check_distribution_rows(p, "transition", ("s", "a"))
        r = _as_float_array(self.reward, 2, "reward")
        if r.shape != (n_s, n_a):
            raise DimensionError("reward", (n_s, n_a), r.shape)
        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise MdpError(f"gamma must lie in [0, 1), got {gamma}")
        p0 = _as_float_array(self.initial_dist, 1, "initial_dist")
        if p0.shape != (n_s,):
            raise DimensionError("initial_dist", (n_s,), p0.shape)
        _check_distribution_rows(p0, "initial_dist", ())
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "initial_dist", p0)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray

    def __post_init__(self):
        probs = _as_float_array(self.probs, 2, "policy")
        _check_distribution_rows(probs, "policy", ("s",))
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def __call__(self, a: int, s: int) -> float:
        return float(self.probs[s, a])


@dataclass(frozen=True, eq=False)
class InducedChain:
    P: np.ndarray
    r: np.ndarray

    @property
    def n_states(self) -> int:
        return self.P.shape[0]


@dataclass(frozen=True, eq=False)
class LambdaBellman:
    lam: float
    gamma: float
    r_lambda: np.ndarray
    P_lambda: np.ndarray

    @property
    def contraction_factor(self) -> float:
        return self.gamma * (1.0 - self.lam) / (1.0 - self.gamma * self.lam)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return apply_bellman(self, v)


def _check_policy_dims(mdp: FiniteMdp, policy: Policy, name: str = "policy") -> None:
    if policy.n_states != mdp.n_states:
        raise DimensionError(f"{name} state axis", mdp.n_states, policy.n_states)
    if policy.n_actions != mdp.n_actions:
        raise DimensionError(f"{name} action axis", mdp.n_actions, policy.n_actions)


def induce_chain(mdp: FiniteMdp, policy: Policy) -> InducedChain:
    """Markov chain over states obtained by following ``policy`` in ``mdp``."""
    _check_policy_dims(mdp, policy)
    P = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    P.setflags(write=False)
    r.setflags(write=False)
    return InducedChain(P=P, r=r)


def _solve(M: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    x = np.linalg.solve(M, rhs)
    residual = np.max(np.abs(M @ x - rhs), initial=0.0)
    scale = max(1.0, np.max(np.abs(rhs), initial=0.0)) * max(1.0, np.linalg.norm(x, np.inf))
    if residual > SOLVE_RTOL * scale:
        raise RuntimeError(f"linear solve for {what} has residual {residual:.3e}")
    return x


def stationary_distribution(chain, tol: float = 1e-10) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix.

    Solves ``(P^T - I) d = 0`` with the normalisation ``sum(d) = 1`` replacing
    the last equation, so periodic chains such as ``[[0, 1], [1, 0]]`` are
    handled without power iteration.

    Parameters
    ----------
    chain : InducedChain or array_like
        The chain, or its transition matrix.
    tol : float
        Bound on ``||d^T P - d^T||_inf`` for the returned vector.

    Raises
    ------
    StationaryDistributionError
        When the chain has no unique stationary distribution; the exception
        carries the residual of the best attempt.
    """
    P = chain.P if isinstance(chain, InducedChain) else np.asarray(chain, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionError("transition matrix", "square", P.shape)
    n = P.shape[0]
    M = P.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        d = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        d, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        residual = float(np.max(np.abs(d @ P - d)))
        raise StationaryDistributionError("chain is reducible: singular balance equations", residual)
    residual = float(np.max(np.abs(d @ P - d)))
    if residual > tol or np.min(d) < -tol:
        raise StationaryDistributionError("no valid stationary distribution", residual)
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    return d


def lambda_bellman(mdp: FiniteMdp, chain: InducedChain, lam: float) -> LambdaBellman:
    """Components ``r_{pi,lambda}`` and ``P_{pi,lambda}`` of the lambda-Bellman operator."""
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if chain.n_states != mdp.n_states:
        raise DimensionError("chain state axis", mdp.n_states, chain.n_states)
    n = mdp.n_states
    M = np.eye(n) - mdp.gamma * lam * chain.P
    r_lam = _solve(M, chain.r, "r_lambda")
    P_lam = (1.0 - lam) * _solve(M, chain.P, "P_lambda")
    r_lam.setflags(write=False)
    P_lam.setflags(write=False)
    return LambdaBellman(lam=lam, gamma=mdp.gamma, r_lambda=r_lam, P_lambda=P_lam)


def apply_bellman(op: LambdaBellman, v: np.ndarray, gamma: float | None = None) -> np.ndarray:
    """``T_{pi,lambda} v = r_{pi,lambda} + gamma P_{pi,lambda} v``."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != op.r_lambda.shape[0]:
        raise DimensionError("value vector", op.r_lambda.shape[0], v.shape[0])
    g = op.gamma if gamma is None else gamma
    return op.r_lambda + g * (op.P_lambda @ v)


def value_function(mdp: FiniteMdp, chain: InducedChain) -> np.ndarray:
    n = mdp.n_states
    return _solve(np.eye(n) - mdp.gamma * chain.P, chain.r, "v_pi")


def importance_ratio(pi: Policy, mu: Policy, s: int, a: int) -> float:
    m = mu.probs[s, a]
    if m <= 0.0:
        raise CoverageError(s, a)
    return float(pi.probs[s, a] / m)


def importance_ratios(pi: Policy, mu: Policy) -> np.ndarray:
    """Table ``rho[s, a]``; requires ``mu(a|s) > 0`` everywhere."""
    if pi.probs.shape != mu.probs.shape:
        raise DimensionError("policy shapes", pi.probs.shape, mu.probs.shape)
    zero = np.argwhere(mu.probs <= 0.0)
    if len(zero):
        raise CoverageError(int(zero[0][0]), int(zero[0][1]))
    return pi.probs / mu.probs


def check_full_column_rank(features, tol: float | None = None) -> np.ndarray:
    """Return ``features`` as an array, raising if its columns are dependent.

    The offending column reported is the first one that does not increase the
    rank of the columns before it.
    """
    Phi = np.asarray(features, dtype=float)
    if Phi.ndim != 2:
        raise DimensionError("features.ndim", 2, Phi.ndim)
    n_s, k = Phi.shape
    rank = np.linalg.matrix_rank(Phi, tol=tol)
    if rank == k:
        return Phi
    for j in range(k):
        if np.linalg.matrix_rank(Phi[:, : j + 1], tol=tol) < j + 1:
            raise RankDeficientError(j, int(rank))
    raise RankDeficientError(k - 1, int(rank))  # pragma: no cover


def projection_matrix(features, d) -> np.ndarray:
    """``Pi_{Phi,d} = Phi (Phi^T D Phi)^{-1} Phi^T D``."""
    Phi = check_full_column_rank(features)
    d = np.asarray(d, dtype=float)
    if d.shape != (Phi.shape[0],):
        raise DimensionError("weighting", (Phi.shape[0],), d.shape)
    if np.min(d) <= MIN_WEIGHT:
        raise MdpError(f"weighting must be strictly positive (min {np.min(d):.3e})")
    PhiTD = Phi.T * d
    return Phi @ np.linalg.solve(PhiTD @ Phi, PhiTD)


def weighted_norm(x, d) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.sum(np.asarray(d) * x * x)))


def mspbe(mdp: FiniteMdp, pi: Policy, features, d, lam: float, theta) -> float:
    """Projected Bellman error ``||Pi_d T_{pi,lambda} Phi theta - Phi theta||_d^2``.

    With ``d = d_mu`` this is the off-policy objective minimised by GTD; with
    the emphatic weighting ``m`` it is the objective whose zero ETD finds.
    """
    Phi = check_full_column_rank(features)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (Phi.shape[1],):
        raise DimensionError("theta", (Phi.shape[1],), theta.shape)
    op = lambda_bellman(mdp, induce_chain(mdp, pi), lam)
    v = Phi @ theta
    diff = projection_matrix(Phi, d) @ apply_bellman(op, v) - v
    return weighted_norm(diff, d) ** 2
