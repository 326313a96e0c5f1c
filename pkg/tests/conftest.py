import numpy as np
import pytest

from rlfault.agents import LINEAR, RELU, Layer, QNetwork
from rlfault.envs import CartPoleEnv, EnvironmentConfig, MountainCarEnv


@pytest.fixture
def cartpole():
    return CartPoleEnv(EnvironmentConfig(kind="cartpole", seed=0))


@pytest.fixture
def mountain_car():
    return MountainCarEnv(EnvironmentConfig(kind="mountain_car", seed=0))


@pytest.fixture
def identity_net():
    """Two-input, two-action network computing Q(s) = s."""
    return QNetwork([Layer(np.eye(2), np.zeros(2), LINEAR)])


def small_random_net(obs_dim, n_actions, seed=0, hidden=8):
    rng = np.random.default_rng(seed)
    return QNetwork(
        [
            Layer(rng.normal(size=(obs_dim, hidden)), rng.normal(size=hidden), RELU),
            Layer(rng.normal(size=(hidden, n_actions)), rng.normal(size=n_actions), LINEAR),
        ]
    )


@pytest.fixture
def cartpole_net():
    """Untrained but non-degenerate Q-network with CartPole shapes."""
    return small_random_net(4, 2, seed=3)


@pytest.fixture
def mountain_car_net():
    return small_random_net(2, 3, seed=4)
