"""Environment bundles: MDP, target/behaviour policies, features, interest."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .learners import Schedule
from .mdp import (
    FiniteMdp,
    MdpError,
    Policy,
    RankDeficientError,
    StationaryDistributionError,
    check_full_column_rank,
    induce_chain,
    stationary_distribution,
)
from .spectral import etd_expected_system, gtd_expected_system, spectral_report, td_mean_field

BUILTINS = ("divergence_star", "random_offpolicy", "tabular_chain")
MAX_RETRIES = 100
MAX_CONDITION = 1e4
MAX_FEATURE_CONDITION = 4.0
MIN_DECAY_RATE = 0.02


@dataclass(frozen=True, eq=False)
class EnvironmentBundle:
    name: str
    mdp: FiniteMdp
    pi: Policy
    mu: Policy
    features: np.ndarray
    interest: np.ndarray | None = None
    theta0: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.features.shape[1]

    def interest_vector(self) -> np.ndarray:
        if self.interest is None:
            return np.ones(self.mdp.n_states)
        return np.asarray(self.interest, dtype=float)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "n_states": self.mdp.n_states,
            "n_actions": self.mdp.n_actions,
            "transition": self.mdp.transition.tolist(),
            "reward": self.mdp.reward.tolist(),
            "gamma": self.mdp.gamma,
            "initial_dist": self.mdp.initial_dist.tolist(),
            "policies": {"target": self.pi.probs.tolist(), "behavior": self.mu.probs.tolist()},
            "features": np.asarray(self.features).tolist(),
        }
        if self.interest is not None:
            out["interest"] = np.asarray(self.interest).tolist()
        if self.theta0 is not None:
            out["theta0"] = np.asarray(self.theta0).tolist()
        return out

    def to_json(self) -> str:
        # repr() of a float round-trips exactly
        return json.dumps(self.to_dict(), sort_keys=True)


class BundleFormatError(MdpError):
    pass


_TARGET_KEYS = ("target", "pi")
_BEHAVIOUR_KEYS = ("behavior", "behaviour", "mu")


def bundle_from_dict(doc: dict, name: str | None = None) -> EnvironmentBundle:
    """Build and validate a bundle from the JSON document layout.

    ``transition`` is nested ``[s][a][s']``; ``policies`` maps names to
    ``[s][a]`` tables and must contain a target (``target``/``pi``) and a
    behaviour (``behavior``/``mu``) policy.  A policy named on its own is used
    for both roles.
    """
    for key in ("n_states", "n_actions", "transition", "reward", "gamma", "initial_dist", "policies", "features"):
        if key not in doc:
            raise BundleFormatError(f"missing field {key!r}")
    n_s, n_a = int(doc["n_states"]), int(doc["n_actions"])
    p = np.asarray(doc["transition"], dtype=float)
    if p.shape != (n_s, n_a, n_s):
        raise BundleFormatError(f"transition has shape {p.shape}, expected {(n_s, n_a, n_s)}")
    mdp = FiniteMdp(transition=p, reward=doc["reward"], gamma=doc["gamma"], initial_dist=doc["initial_dist"])
    policies = doc["policies"]
    pi_key = next((k for k in _TARGET_KEYS if k in policies), None)
    mu_key = next((k for k in _BEHAVIOUR_KEYS if k in policies), None)
    if len(policies) == 1:
        pi_key = mu_key = next(iter(policies))
    if pi_key is None or mu_key is None:
        raise BundleFormatError(f"policies must name a target and a behaviour policy, got {sorted(policies)}")
    pi, mu = Policy(policies[pi_key]), Policy(policies[mu_key])
    for role, pol in (("target", pi), ("behaviour", mu)):
        if pol.probs.shape != (n_s, n_a):
            raise BundleFormatError(f"{role} policy has shape {pol.probs.shape}, expected {(n_s, n_a)}")
    Phi = np.asarray(doc["features"], dtype=float)
    if Phi.ndim != 2 or Phi.shape[0] != n_s:
        raise BundleFormatError(f"features must be [n_states][K], got shape {Phi.shape}")
    interest = doc.get("interest")
    if interest is not None:
        interest = np.asarray(interest, dtype=float)
        if interest.shape != (n_s,):
            raise BundleFormatError(f"interest has shape {interest.shape}, expected {(n_s,)}")
        bad = np.flatnonzero(interest <= 0)
        if len(bad):
            raise BundleFormatError(f"interest must be positive; i({bad[0]}) = {interest[bad[0]]}")
    theta0 = doc.get("theta0")
    if theta0 is not None:
        theta0 = np.asarray(theta0, dtype=float)
        if theta0.shape != (Phi.shape[1],):
            raise BundleFormatError(f"theta0 has shape {theta0.shape}, expected {(Phi.shape[1],)}")
    return EnvironmentBundle(
        name=name or doc.get("name", "custom"),
        mdp=mdp, pi=pi, mu=mu, features=Phi, interest=interest, theta0=theta0,
    )


def load_bundle(path) -> EnvironmentBundle:
    with open(path) as fh:
        doc = json.load(fh)
    return bundle_from_dict(doc)


def save_bundle(bundle: EnvironmentBundle, path) -> None:
    with open(path, "w") as fh:
        fh.write(bundle.to_json())


# -- builtins ------------------------------------------------------------------


def _divergence_star() -> EnvironmentBundle:
    # Baird's star: states 0-5 outer, 6 the hub; action 0 "solid" goes to the
    # hub, action 1 "dashed" goes uniformly to an outer state.
    n_s, n_a = 7, 2
    p = np.zeros((n_s, n_a, n_s))
    p[:, 0, 6] = 1.0
    p[:, 1, :6] = 1.0 / 6.0
    mdp = FiniteMdp(transition=p, reward=np.zeros((n_s, n_a)), gamma=0.99, initial_dist=np.full(n_s, 1.0 / n_s))
    pi = Policy(np.tile([1.0, 0.0], (n_s, 1)))
    mu = Policy(np.tile([1.0 / 7.0, 6.0 / 7.0], (n_s, 1)))
    Phi = np.zeros((n_s, 8))
    for s in range(6):
        Phi[s, s] = 2.0
        Phi[s, 7] = 1.0
    Phi[6, 6] = 1.0
    Phi[6, 7] = 2.0
    bundle = EnvironmentBundle(
        name="divergence_star", mdp=mdp, pi=pi, mu=mu, features=Phi,
        theta0=np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0, 1.0]),
    )
    A, _ = td_mean_field(mdp, pi, mu, 0.0, Phi)
    rep = spectral_report(A)
    if not rep.max_real_part > 1e-10:
        raise RuntimeError("divergence_star construction lost its unstable mode")  # pragma: no cover
    bundle.metadata["td_mean_field_max_real_part"] = rep.max_real_part
    return bundle


def _tabular_chain(n_states: int = 4, gamma: float = 0.9) -> EnvironmentBundle:
    # a ring with a "stay" action; rewards depend on the state only
    n_a = 2
    p = np.zeros((n_states, n_a, n_states))
    for s in range(n_states):
        p[s, 0, (s + 1) % n_states] = 1.0
        p[s, 1, s] = 0.5
        p[s, 1, (s + 1) % n_states] += 0.5
    reward = np.tile(np.arange(n_states, dtype=float)[:, None], (1, n_a))
    mdp = FiniteMdp(transition=p, reward=reward, gamma=gamma, initial_dist=np.full(n_states, 1.0 / n_states))
    pol = Policy(np.tile([0.7, 0.3], (n_states, 1)))
    return EnvironmentBundle(name="tabular_chain", mdp=mdp, pi=pol, mu=pol, features=np.eye(n_states))


def _random_candidate(rng: np.random.Generator, n_states, n_actions, n_features, gamma):
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    mu = 0.5 / n_actions + 0.5 * rng.dirichlet(np.ones(n_actions), size=n_states)
    pi = 0.5 * mu + 0.5 * rng.dirichlet(np.ones(n_actions), size=n_states)
    Phi = rng.uniform(-1.0, 1.0, size=(n_states, n_features))
    for arr in (p, mu, pi):
        arr /= arr.sum(axis=-1, keepdims=True)
    mdp = FiniteMdp(transition=p, reward=reward, gamma=gamma, initial_dist=np.full(n_states, 1.0 / n_states))
    return mdp, Policy(pi), Policy(mu), Phi


def random_offpolicy(
    seed: int = 0,
    n_states: int = 5,
    n_actions: int = 2,
    n_features: int = 3,
    gamma: float = 0.9,
    lambdas=(0.0, 0.5, 0.9, 1.0),
) -> EnvironmentBundle:
    """Random off-policy instance satisfying every checked assumption.

    Candidates are redrawn from the same stream until all checks pass for
    every ``lambda`` in ``lambdas``, the feature matrix has condition number
    at most 4, the GTD/ETD matrices are reasonably conditioned and the GTD
    mean ODE contracts at rate at least ``MIN_DECAY_RATE``.  The number of
    redraws is kept in ``metadata["retries"]``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    for retries in range(MAX_RETRIES):
        mdp, pi, mu, Phi = _random_candidate(rng, n_states, n_actions, n_features, gamma)
        bundle = EnvironmentBundle(
            name="random_offpolicy", mdp=mdp, pi=pi, mu=mu, features=Phi,
            metadata={"seed": seed, "retries": retries},
        )
        if np.linalg.cond(Phi) > MAX_FEATURE_CONDITION:
            continue
        if all(check_assumptions(bundle, lam).passed for lam in lambdas) and _well_conditioned(bundle, lambdas):
            return bundle
    raise RuntimeError(f"random_offpolicy(seed={seed}) found no valid instance in {MAX_RETRIES} draws")


def _well_conditioned(bundle: EnvironmentBundle, lambdas) -> bool:
    for lam in lambdas:
        gtd = gtd_expected_system(bundle.mdp, bundle.pi, bundle.mu, lam, bundle.features)
        etd = etd_expected_system(bundle.mdp, bundle.pi, bundle.mu, lam, bundle.interest_vector(), bundle.features)
        if np.linalg.cond(gtd.A) > MAX_CONDITION or np.linalg.cond(etd.A) > MAX_CONDITION:
            return False
        if spectral_report(gtd.A_block).max_real_part > -MIN_DECAY_RATE:
            return False
    return True


def builtin_environment(name: str, seed: int = 0, **kwargs) -> EnvironmentBundle:
    if name == "divergence_star":
        return _divergence_star()
    if name == "random_offpolicy":
        return random_offpolicy(seed=seed, **kwargs)
    if name == "tabular_chain":
        return _tabular_chain(**kwargs)
    raise KeyError(f"unknown environment {name!r}; builtins are {BUILTINS}")


# -- assumption checks ----------------------------------------------------------


@dataclass
class CheckItem:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class AssumptionReport:
    lam: float
    items: list[CheckItem]

    @property
    def passed(self) -> bool:
        return all(item.passed for item in self.items)

    def __getitem__(self, name: str) -> CheckItem:
        for item in self.items:
            if item.name == name:
                return item
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "passed": self.passed,
            "items": [{"name": i.name, "passed": i.passed, "detail": i.detail} for i in self.items],
        }


def check_assumptions(bundle: EnvironmentBundle, lam: float, schedule: Schedule | None = None) -> AssumptionReport:
    """Pass/fail checklist for the GTD/ETD convergence hypotheses.

    Never raises on a failed hypothesis; failures are report content.  Items
    that depend on an earlier failed item are reported as failed with
    ``skipped`` in the detail.
    """
    items: list[CheckItem] = []
    mdp, pi, mu = bundle.mdp, bundle.pi, bundle.mu

    zero = np.argwhere(mu.probs <= 0.0)
    if len(zero):
        s, a = (int(v) for v in zero[0])
        support = "inside" if pi.probs[s, a] > 0 else "outside"
        items.append(CheckItem("coverage", False, f"mu(a={a}|s={s}) = 0 ({support} the support of pi)"))
    else:
        items.append(CheckItem("coverage", True, f"min mu(a|s) = {mu.probs.min():.3g}"))

    try:
        d_mu = stationary_distribution(induce_chain(mdp, mu))
        irreducible = bool(np.min(d_mu) > 1e-12)
        items.append(CheckItem(
            "irreducibility", irreducible,
            f"min d_mu = {np.min(d_mu):.3g}" if irreducible else f"state {int(np.argmin(d_mu))} is transient",
        ))
    except StationaryDistributionError as exc:
        irreducible = False
        items.append(CheckItem("irreducibility", False, str(exc)))

    if schedule is None:
        items.append(CheckItem("schedule", True, "no schedule supplied"))
    else:
        ok = schedule.beta == 1.0
        items.append(CheckItem(
            "schedule", ok,
            f"alpha(n) = {schedule.B1}/(n+{schedule.B2})^{schedule.beta}"
            + ("" if ok else "; beta != 1 is outside the B1/(t+B2) form"),
        ))

    try:
        check_full_column_rank(bundle.features)
        full_rank = True
        items.append(CheckItem("feature_rank", True, f"rank {bundle.K}"))
    except RankDeficientError as exc:
        full_rank = False
        items.append(CheckItem("feature_rank", False, f"column {exc.column} dependent; rank {exc.rank}"))

    if not (irreducible and full_rank):
        items.append(CheckItem("gtd_nonsingular", False, "skipped: needs irreducibility and full rank"))
        items.append(CheckItem("etd_negative_definite", False, "skipped: needs irreducibility and full rank"))
        return AssumptionReport(lam=lam, items=items)

    gtd = gtd_expected_system(mdp, pi, mu, lam, bundle.features)
    rep = spectral_report(gtd.A)
    items.append(CheckItem(
        "gtd_nonsingular", not rep.singular, f"cond(A) = {rep.condition_number:.3g}",
    ))
    try:
        etd = etd_expected_system(mdp, pi, mu, lam, bundle.interest_vector(), bundle.features)
        erep = spectral_report(etd.A)
        items.append(CheckItem(
            "etd_negative_definite", erep.is_negative_definite,
            f"max eig(A + A^T) = {erep.max_symmetric_eigenvalue:.3g}",
        ))
    except MdpError as exc:
        items.append(CheckItem("etd_negative_definite", False, str(exc)))
    return AssumptionReport(lam=lam, items=items)
