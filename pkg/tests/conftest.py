import numpy as np
import pytest

from markov_sa.mdp import FiniteMdp, Policy


def random_mdp(rng, n_states=5, n_actions=2, gamma=0.9):
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(-1, 1, size=(n_states, n_actions))
    return FiniteMdp(transition=p, reward=r, gamma=gamma, initial_dist=np.full(n_states, 1.0 / n_states))


def random_policy(rng, n_states=5, n_actions=2, floor=0.0):
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    probs = floor / n_actions + (1.0 - floor) * probs
    return Policy(probs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_mdp(rng):
    return random_mdp(rng)
