import numpy as np
import pytest

from laser.envs import garnet
from laser.mdp import TabularPolicy


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int, floor: float = 0.05) -> TabularPolicy:
    """Full-support random policy (every action has probability >= floor / n_actions)."""
    p = rng.dirichlet(np.ones(n_actions), size=n_states)
    p = (1 - floor) * p + floor / n_actions
    return TabularPolicy(p / p.sum(axis=1, keepdims=True))


def random_mdp(seed: int, n_states: int = 5, n_actions: int = 3, discount: float = 0.9,
               terminal_prob: float = 0.0, branching: int = 2):
    return garnet(n_states=n_states, n_actions=n_actions, branching=branching, seed=seed,
                  discount=discount, terminal_prob=terminal_prob)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
