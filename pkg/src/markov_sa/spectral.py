"""Expected-update matrices of GTD(lambda)/ETD(lambda) and stability verdicts."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mdp import (
    FiniteMdp,
    MdpError,
    Policy,
    check_full_column_rank,
    induce_chain,
    lambda_bellman,
    stationary_distribution,
)

EIG_MARGIN = 1e-10
ILL_CONDITIONED = 1e8


@dataclass(frozen=True, eq=False)
class GtdSystem:
    """``A``, ``b``, ``C`` and the block system acting on ``x = [nu; theta]``."""

    A: np.ndarray
    b: np.ndarray
    C: np.ndarray
    d_mu: np.ndarray

    @property
    def A_block(self) -> np.ndarray:
        K = self.A.shape[0]
        out = np.zeros((2 * K, 2 * K))
        out[:K, :K] = -self.C
        out[:K, K:] = self.A
        out[K:, :K] = -self.A.T
        return out

    @property
    def b_block(self) -> np.ndarray:
        return np.concatenate([self.b, np.zeros_like(self.b)])

    def fixed_point(self) -> np.ndarray:
        """``-A^{-1} b``, the limit of the theta iterates."""
        return -np.linalg.solve(self.A, self.b)


@dataclass(frozen=True, eq=False)
class EtdSystem:
    A: np.ndarray
    b: np.ndarray
    m: np.ndarray
    d_mu: np.ndarray

    def fixed_point(self) -> np.ndarray:
        return -np.linalg.solve(self.A, self.b)


def _verdict(value: float) -> str:
    if value < -EIG_MARGIN:
        return "true"
    if value > EIG_MARGIN:
        return "false"
    return "indeterminate"


@dataclass(frozen=True, eq=False)
class SpectralReport:
    eigenvalues: np.ndarray
    max_real_part: float
    max_symmetric_eigenvalue: float
    condition_number: float
    singular: bool
    fixed_point: np.ndarray | None = None

    @property
    def is_hurwitz(self) -> bool:
        return self.max_real_part < -EIG_MARGIN

    @property
    def is_negative_definite(self) -> bool:
        return self.max_symmetric_eigenvalue < -EIG_MARGIN

    @property
    def hurwitz_verdict(self) -> str:
        return _verdict(self.max_real_part)

    @property
    def negative_definite_verdict(self) -> str:
        return _verdict(self.max_symmetric_eigenvalue)

    @property
    def ill_conditioned(self) -> bool:
        return not self.condition_number < ILL_CONDITIONED

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "max_real_part": self.max_real_part,
            "max_symmetric_eigenvalue": self.max_symmetric_eigenvalue,
            "is_hurwitz": self.is_hurwitz,
            "is_negative_definite": self.is_negative_definite,
            "hurwitz_verdict": self.hurwitz_verdict,
            "negative_definite_verdict": self.negative_definite_verdict,
            "condition_number": self.condition_number,
            "ill_conditioned": self.ill_conditioned,
            "singular": self.singular,
            "fixed_point": None if self.fixed_point is None else self.fixed_point.tolist(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def spectral_report(M, b=None) -> SpectralReport:
    """Eigenvalue diagnostics for a square matrix ``M``.

    ``M`` is Hurwitz when every eigenvalue has real part below ``-1e-10`` and
    negative definite when the symmetric part ``M + M^T`` does.  If ``b`` is
    given and ``M`` is nonsingular the report carries ``-M^{-1} b``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"spectral_report needs a square matrix, got shape {M.shape}")
    eig = np.linalg.eigvals(M)
    order = np.lexsort((eig.imag, -eig.real))
    eig = eig[order]
    sym = np.linalg.eigvalsh(M + M.T)
    sv = np.linalg.svd(M, compute_uv=False)
    singular = bool(sv[-1] <= EIG_MARGIN * max(1.0, sv[0]))
    cond = float("inf") if sv[-1] == 0.0 else float(sv[0] / sv[-1])
    fixed = None
    if b is not None and not singular:
        fixed = -np.linalg.solve(M, np.asarray(b, dtype=float))
    return SpectralReport(
        eigenvalues=eig,
        max_real_part=float(np.max(eig.real)),
        max_symmetric_eigenvalue=float(np.max(sym)),
        condition_number=cond,
        singular=singular,
        fixed_point=fixed,
    )


def _behaviour_weights(mdp: FiniteMdp, mu: Policy) -> np.ndarray:
    return stationary_distribution(induce_chain(mdp, mu))


def gtd_expected_system(mdp: FiniteMdp, pi: Policy, mu: Policy, lam: float, features) -> GtdSystem:
    """Analytic ``A = Phi^T D_mu (gamma P_{pi,lambda} - I) Phi``, ``b``, ``C``."""
    Phi = check_full_column_rank(features)
    if Phi.shape[0] != mdp.n_states:
        raise MdpError(f"features have {Phi.shape[0]} rows, MDP has {mdp.n_states} states")
    d_mu = _behaviour_weights(mdp, mu)
    op = lambda_bellman(mdp, induce_chain(mdp, pi), lam)
    A, b = _weighted_system(Phi, d_mu, op, mdp.gamma)
    C = (Phi.T * d_mu) @ Phi
    C = 0.5 * (C + C.T)
    return GtdSystem(A=A, b=b, C=C, d_mu=d_mu)


def _weighted_system(Phi, weights, op, gamma):
    PhiTD = Phi.T * weights
    A = PhiTD @ (gamma * op.P_lambda - np.eye(Phi.shape[0])) @ Phi
    b = PhiTD @ op.r_lambda
    return A, b


def emphatic_weights(mdp: FiniteMdp, pi: Policy, mu: Policy, lam: float, interest) -> np.ndarray:
    """``m = (I - gamma P_{pi,lambda}^T)^{-1} D_mu i``."""
    interest = np.broadcast_to(np.asarray(interest, dtype=float), (mdp.n_states,))
    if np.any(interest <= 0):
        s = int(np.argmax(interest <= 0))
        raise MdpError(f"interest must be strictly positive; i({s}) = {interest[s]}")
    d_mu = _behaviour_weights(mdp, mu)
    op = lambda_bellman(mdp, induce_chain(mdp, pi), lam)
    n = mdp.n_states
    return np.linalg.solve(np.eye(n) - mdp.gamma * op.P_lambda.T, d_mu * interest)


def etd_expected_system(mdp: FiniteMdp, pi: Policy, mu: Policy, lam: float, interest, features) -> EtdSystem:
    Phi = check_full_column_rank(features)
    if Phi.shape[0] != mdp.n_states:
        raise MdpError(f"features have {Phi.shape[0]} rows, MDP has {mdp.n_states} states")
    m = emphatic_weights(mdp, pi, mu, lam, interest)
    op = lambda_bellman(mdp, induce_chain(mdp, pi), lam)
    A, b = _weighted_system(Phi, m, op, mdp.gamma)
    return EtdSystem(A=A, b=b, m=m, d_mu=_behaviour_weights(mdp, mu))


def td_mean_field(mdp: FiniteMdp, pi: Policy, mu: Policy, lam: float, features):
    """``(A, b)`` of off-policy TD(lambda); features need not have full rank."""
    Phi = np.asarray(features, dtype=float)
    d_mu = _behaviour_weights(mdp, mu)
    op = lambda_bellman(mdp, induce_chain(mdp, pi), lam)
    return _weighted_system(Phi, d_mu, op, mdp.gamma)


def probe_horizon_estimate(M, threshold: float = 0.25) -> float:
    """Time after which ``||exp(M t) x|| <= threshold`` for all ``||x|| <= 1``.

    Uses ``||exp(Mt)|| <= cond(V) exp(t max Re(eig))`` for diagonalisable
    ``M = V diag(eig) V^{-1}``; returns ``inf`` when ``M`` is not Hurwitz.
    """
    eig, V = np.linalg.eig(np.asarray(M, dtype=float))
    rate = float(np.max(eig.real))
    if rate >= 0:
        return float("inf")
    cond = float(np.linalg.cond(V))
    return max(0.0, float(np.log(cond / threshold) / -rate))
