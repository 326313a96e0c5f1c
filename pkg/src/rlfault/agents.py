"""Feed-forward Q-network, double-DQN training, and the greedy policy.

The network is a plain stack of dense layers evaluated in float64 with
hand-written gradients, which keeps training bit-reproducible for a given
seed and lets the loss gradients be checked against finite differences.
Calling the network on a batch of states returns the Q-matrix, so a trained
network is directly usable wherever a Q-function callable is expected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import check_rng, check_state
from .envs import Environment, EnvironmentConfig, make_env
from .episodes import Episode, EpisodeOrigin, Step
from .store import read_json_artifact, write_json_artifact

RELU = "relu"
LINEAR = "linear"


@dataclass
class Layer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = RELU
    trainable: bool = True

    def __post_init__(self):
        if self.activation not in (RELU, LINEAR):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ValueError("layer weight/bias shapes do not chain")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("layer parameters must be finite")


class QNetwork:
    """Deterministic dense Q-network; callable on a state or a state batch."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")
        self.layers = layers

    @property
    def n_inputs(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def n_actions(self) -> int:
        return self.layers[-1].w.shape[1]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x.reshape(1, -1) if single else x
        if h.shape[1] != self.n_inputs:
            raise ValueError(f"input dimension {h.shape[1]}, expected {self.n_inputs}")
        for layer in self.layers:
            h = h @ layer.w + layer.b
            if layer.activation == RELU:
                h = np.maximum(h, 0.0)
        return h[0] if single else h

    def copy(self) -> "QNetwork":
        return QNetwork(
            [
                Layer(l.w.copy(), l.b.copy(), l.activation, l.trainable)
                for l in self.layers
            ]
        )


def q_values(net: QNetwork, s) -> np.ndarray:
    return net(check_state(s, net.n_inputs))


def select_action(net: QNetwork, s) -> int:
    """Greedy action; ties broken toward the lowest action index."""
    return int(np.argmax(q_values(net, s)))


def greedy_policy(net: QNetwork):
    return lambda s: int(np.argmax(net(s)))


def action_probabilities(net: QNetwork, s, temperature: float = 1.0) -> np.ndarray:
    """Softmax over Q-values at the given temperature.

    The trained policy itself is deterministic; the softmax is the standard
    surrogate for per-action selection probabilities of a value-based agent.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = q_values(net, s) / temperature
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def softmax_batch(q: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = q / temperature
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def new_network(
    obs_dim: int,
    n_actions: int,
    hidden_sizes,
    rng,
    input_offset=None,
    input_scale=None,
) -> QNetwork:
    """He-initialised MLP, optionally preceded by a fixed affine input map.

    The fixed first layer rescales raw observations into roughly unit range
    (important where feature magnitudes differ by orders of magnitude); it is
    stored like any other dense layer but never trained.
    """
    layers = []
    if input_offset is not None:
        scale = np.asarray(input_scale, dtype=np.float64)
        offset = np.asarray(input_offset, dtype=np.float64)
        layers.append(
            Layer(np.diag(1.0 / scale), -offset / scale, LINEAR, trainable=False)
        )
    fan_in = obs_dim
    for size in hidden_sizes:
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, size))
        layers.append(Layer(w, np.zeros(size), RELU))
        fan_in = size
    w_out = rng.normal(0.0, 0.01, size=(fan_in, n_actions))
    layers.append(Layer(w_out, np.zeros(n_actions), LINEAR))
    return QNetwork(layers)


def loss_and_gradients(net: QNetwork, states, actions, targets):
    """Mean-squared Q-regression loss and its analytic parameter gradients.

    Loss = mean_i (Q(s_i, a_i) - y_i)^2 over the batch; gradients are
    returned per layer as (dW, db), with None entries for frozen layers.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    n = states.shape[0]

    activations = [states]
    pre = []
    h = states
    for layer in net.layers:
        z = h @ layer.w + layer.b
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == RELU else z
        activations.append(h)

    q_sel = h[np.arange(n), actions]
    err = q_sel - targets
    loss = float(np.mean(err**2))

    delta = np.zeros_like(h)
    delta[np.arange(n), actions] = 2.0 * err / n

    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == RELU:
            delta = delta * (pre[i] > 0.0)
        if layer.trainable:
            grads[i] = (activations[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = delta @ layer.w.T
    return loss, grads


def sgd_step(net: QNetwork, grads, learning_rate: float, grad_clip: float | None):
    if grad_clip is not None:
        total = 0.0
        for g in grads:
            if g is not None:
                total += float(np.sum(g[0] ** 2)) + float(np.sum(g[1] ** 2))
        norm = np.sqrt(total)
        if norm > grad_clip:
            scale = grad_clip / norm
            grads = [None if g is None else (g[0] * scale, g[1] * scale) for g in grads]
    for layer, g in zip(net.layers, grads):
        if g is not None:
            layer.w -= learning_rate * g[0]
            layer.b -= learning_rate * g[1]


def double_dqn_targets(online: QNetwork, target: QNetwork, batch, gamma: float):
    """y = r + gamma * Q_target(s', argmax_a Q_online(s', a)) for non-terminals."""
    states, actions, rewards, next_states, dones = batch
    best = np.argmax(online(next_states), axis=1)
    q_next = target(next_states)[np.arange(len(best)), best]
    return rewards + gamma * (1.0 - dones) * q_next


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.size = 0
        self._pos = 0

    def add(self, state, action, reward, next_state, done):
        i = self._pos
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return (
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.dones[idx],
        )


@dataclass
class TrainConfig:
    total_timesteps: int
    replay_capacity: int = 50_000
    batch_size: int = 64
    gamma: float = 0.99
    learning_rate: float = 0.01
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.1
    hidden_sizes: tuple[int, ...] = (64, 64)
    grad_clip: float | None = 10.0
    learn_start: int = 1_000
    train_every: int = 1
    normalize_inputs: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.total_timesteps < 0:
            raise ValueError("total_timesteps must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        for name in ("replay_capacity", "batch_size", "target_sync", "train_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.eps_decay_fraction <= 1.0:
            raise ValueError("eps_decay_fraction must be in (0, 1]")


class TrainingDivergence(RuntimeError):
    """Raised when the Q-regression loss stops being finite."""


def epsilon_at(config: TrainConfig, t: int) -> float:
    horizon = max(1, int(config.eps_decay_fraction * config.total_timesteps))
    frac = min(1.0, t / horizon)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


def train_dqn(env: Environment, config: TrainConfig):
    """Train a double-DQN agent on ``env``.

    Returns the trained network and the ordered log of completed training
    episodes (with their epsilon-greedy actions and fault labels). Fully
    deterministic for a given config seed.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, env_rng, action_rng, batch_rng = (
        np.random.default_rng(s) for s in seeds
    )

    offset = scale = None
    if config.normalize_inputs:
        offset = (env.FEATURE_HIGH + env.FEATURE_LOW) / 2.0
        scale = (env.FEATURE_HIGH - env.FEATURE_LOW) / 2.0
    net = new_network(
        env.OBS_DIM, env.N_ACTIONS, config.hidden_sizes, init_rng, offset, scale
    )
    target = net.copy()
    buffer = ReplayBuffer(config.replay_capacity, env.OBS_DIM)

    log: list[Episode] = []
    state = env.reset(env_rng)
    current: list[Step] = []

    for t in range(config.total_timesteps):
        if action_rng.uniform() < epsilon_at(config, t):
            action = int(action_rng.integers(env.N_ACTIONS))
        else:
            action = int(np.argmax(net(state)))
        outcome = env.step(action)
        current.append(Step(state, action, outcome.reward))
        buffer.add(state, action, outcome.reward, outcome.next_state, outcome.terminated)
        state = outcome.next_state

        if outcome.terminated:
            log.append(
                Episode.from_steps(
                    f"train-{len(log):05d}",
                    EpisodeOrigin.TRAINING,
                    env.kind(),
                    current,
                    state,
                    outcome.termination_cause,
                )
            )
            current = []
            state = env.reset(env_rng)

        if t + 1 >= config.learn_start and (t + 1) % config.train_every == 0:
            batch = buffer.sample(config.batch_size, batch_rng)
            # Divergence shows up as overflow here; it is detected, not fatal.
            with np.errstate(over="ignore", invalid="ignore"):
                targets = double_dqn_targets(net, target, batch, config.gamma)
                loss, grads = loss_and_gradients(net, batch[0], batch[1], targets)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at step {t + 1}")
            sgd_step(net, grads, config.learning_rate, config.grad_clip)

        if (t + 1) % config.target_sync == 0:
            target = net.copy()

    return net, log


def evaluate_policy(
    net: QNetwork, env_config: EnvironmentConfig, episodes: int = 100, seed: int = 0
) -> float:
    """Mean accumulated reward of the greedy policy over fresh episodes."""
    env = make_env(env_config)
    rng = check_rng(seed)
    policy = greedy_policy(net)
    total = 0.0
    for _ in range(episodes):
        state = env.reset(rng)
        while True:
            outcome = env.step(policy(state))
            total += outcome.reward
            state = outcome.next_state
            if outcome.terminated:
                break
    return total / episodes


AGENT_FILE_KIND = "q-agent"
AGENT_FILE_VERSION = 1


class AgentFileError(Exception):
    pass


def save_agent(path, net: QNetwork, env_kind: str, seed: int, timesteps: int, meta=None):
    payload = {
        "env": env_kind,
        "seed": seed,
        "timesteps": timesteps,
        "layers": [
            {
                "shape": list(l.w.shape),
                "activation": l.activation,
                "trainable": l.trainable,
                "w": l.w.reshape(-1).tolist(),  # row-major
                "b": l.b.tolist(),
            }
            for l in net.layers
        ],
    }
    write_json_artifact(path, AGENT_FILE_KIND, AGENT_FILE_VERSION, payload, meta)


def load_agent(path):
    """Load a saved agent; returns (net, record) with env tag and metadata."""
    from .store import ArtifactError

    try:
        record = read_json_artifact(path, AGENT_FILE_KIND, AGENT_FILE_VERSION)
        layers = [
            Layer(
                np.asarray(spec["w"], dtype=np.float64).reshape(spec["shape"]),
                np.asarray(spec["b"], dtype=np.float64),
                spec["activation"],
                spec["trainable"],
            )
            for spec in record["layers"]
        ]
        net = QNetwork(layers)
    except ArtifactError as exc:
        raise AgentFileError(str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise AgentFileError(f"{path}: malformed agent record: {exc}") from exc
    return net, record
