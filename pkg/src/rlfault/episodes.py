"""Episode data model, generation, sampling, and binary feature encoding.

An episode is an ordered sequence of (state, action, reward) steps plus the
terminal state the last transition produced. The terminal state is kept so a
recorded boundary fault can be re-checked after the fact, and it participates
in feature encoding (a fault signature usually lives in the final states).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .abstraction import UNKNOWN_STATE, AbstractionIndex
from .base import ParamsMixin, check_rng
from .envs import Environment, TerminationCause
from .store import CorruptArtifactError, read_jsonl, write_jsonl


class EpisodeOrigin(str, Enum):
    TRAINING = "training"
    RANDOM = "random"
    CROSSOVER = "crossover"
    MUTATED = "mutated"


@dataclass(frozen=True)
class Step:
    state: np.ndarray
    action: int
    reward: float


@dataclass
class Episode:
    episode_id: str
    origin: EpisodeOrigin
    env_kind: str
    steps: list[Step]
    final_state: np.ndarray
    termination_cause: TerminationCause
    fault: bool
    accumulated_reward: float

    def __post_init__(self):
        if not self.steps:
            raise ValueError("episode must contain at least one step")
        if self.fault != (self.termination_cause is TerminationCause.BOUNDARY_FAULT):
            raise ValueError("fault label inconsistent with termination cause")

    def __len__(self):
        return len(self.steps)

    @classmethod
    def from_steps(cls, episode_id, origin, env_kind, steps, final_state, cause):
        return cls(
            episode_id=episode_id,
            origin=EpisodeOrigin(origin),
            env_kind=env_kind,
            steps=list(steps),
            final_state=np.asarray(final_state, dtype=np.float64),
            termination_cause=TerminationCause(cause),
            fault=TerminationCause(cause) is TerminationCause.BOUNDARY_FAULT,
            accumulated_reward=float(sum(s.reward for s in steps)),
        )

    def recompute_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    def step_states(self) -> np.ndarray:
        """States in which actions were taken, shape (len(e), obs_dim)."""
        return np.stack([s.state for s in self.steps])

    def all_states(self) -> np.ndarray:
        """Step states plus the terminal state, shape (len(e) + 1, obs_dim)."""
        return np.vstack([self.step_states(), self.final_state])

    def actions(self) -> np.ndarray:
        return np.array([s.action for s in self.steps], dtype=np.int64)


def label_fault(episode: Episode) -> bool:
    """Functional-fault label of a terminated episode."""
    if episode.termination_cause is TerminationCause.NONE:
        raise ValueError("episode has not terminated")
    return episode.termination_cause is TerminationCause.BOUNDARY_FAULT


def run_episode(
    env: Environment,
    policy,
    rng=None,
    origin=EpisodeOrigin.RANDOM,
    episode_id="episode",
    initial_state=None,
) -> Episode:
    """Roll one episode to termination under ``policy`` (a state -> action map)."""
    if initial_state is None:
        state = env.reset(rng)
    else:
        env.set_state(initial_state, steps_elapsed=0)
        state = env.state
    steps = []
    while True:
        action = int(policy(state))
        outcome = env.step(action)
        steps.append(Step(state, action, outcome.reward))
        state = outcome.next_state
        if outcome.terminated:
            return Episode.from_steps(
                episode_id, origin, env.kind(), steps, state, outcome.termination_cause
            )


def run_random_episodes(
    env: Environment, policy, count: int, rng=None, id_prefix="rand"
) -> list[Episode]:
    """Random executions of the agent: fresh uniform initial state per episode."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = check_rng(rng)
    return [
        run_episode(env, policy, rng, EpisodeOrigin.RANDOM, f"{id_prefix}-{i:05d}")
        for i in range(count)
    ]


def sample_training_episodes(log: list[Episode], k: int, rng=None) -> list[Episode]:
    """Draw k training episodes, biased toward the later stage of training.

    Episode i (1-based) starts with weight i / (1 + 2 + ... + n); draws are
    without replacement, renormalising the remaining weights after each draw.
    Later episodes are more consistent with the final policy, hence the bias.
    """
    n = len(log)
    if k > n:
        raise ValueError(f"cannot sample {k} episodes from a log of {n}")
    rng = check_rng(rng)
    remaining = list(range(n))
    weights = np.arange(1, n + 1, dtype=np.float64)
    chosen = []
    for _ in range(k):
        w = weights[remaining]
        pick = rng.choice(len(remaining), p=w / w.sum())
        chosen.append(remaining.pop(pick))
    return [log[i] for i in chosen]


def encode_features(episode: Episode, index: AbstractionIndex, q_fn) -> np.ndarray:
    """Binary presence vector over the index's abstract states.

    Bit i is 1 iff some state of the episode maps to abstract state i; states
    with unknown keys contribute nothing. Repeat visits and step order do not
    matter.
    """
    vec = np.zeros(index.n_states, dtype=np.uint8)
    for sid in index.ids_for_states(episode.all_states(), q_fn):
        if sid != UNKNOWN_STATE:
            vec[sid] = 1
    return vec


def encode_episodes(episodes, index: AbstractionIndex, q_fn) -> np.ndarray:
    if not episodes:
        return np.zeros((0, index.n_states), dtype=np.uint8)
    return np.stack([encode_features(e, index, q_fn) for e in episodes])


class EpisodeFeatureEncoder(ParamsMixin):
    """fit/transform face of the abstraction pipeline.

    ``fit`` builds the abstract-state index from concrete states (either a
    stacked (n, obs_dim) array or a list of episodes); ``transform`` turns
    episodes into the binary presence matrix the classifiers consume.
    """

    def __init__(self, q_fn=None, level=1.0):
        self.q_fn = q_fn
        self.level = level

    def fit(self, X, y=None):
        if self.q_fn is None:
            raise ValueError("q_fn must be set before fitting")
        states = _as_state_batch(X)
        self.index_ = AbstractionIndex.build(states, self.q_fn, self.level)
        self.n_features_ = self.index_.n_states
        return self

    def transform(self, episodes) -> np.ndarray:
        if not hasattr(self, "index_"):
            raise ValueError("encoder is not fitted")
        return encode_episodes(episodes, self.index_, self.q_fn)

    def fit_transform(self, X, y=None):
        return self.fit(X, y).transform(X)


def _as_state_batch(X):
    if isinstance(X, np.ndarray):
        return X
    return np.vstack([e.all_states() for e in X])


def collect_states(episodes) -> np.ndarray:
    """All concrete states visited by a set of episodes, stacked."""
    return _as_state_batch(list(episodes))


EPISODE_FILE_KIND = "episode-file"
EPISODE_FILE_VERSION = 1


def episode_to_record(e: Episode) -> dict:
    return {
        "id": e.episode_id,
        "origin": e.origin.value,
        "env": e.env_kind,
        "steps": [[s.state.tolist(), s.action, s.reward] for s in e.steps],
        "final_state": e.final_state.tolist(),
        "cause": e.termination_cause.value,
        "fault": e.fault,
        "reward": e.accumulated_reward,
    }


def episode_from_record(record: dict) -> Episode:
    try:
        steps = [
            Step(np.asarray(state, dtype=np.float64), int(action), float(reward))
            for state, action, reward in record["steps"]
        ]
        episode = Episode(
            episode_id=record["id"],
            origin=EpisodeOrigin(record["origin"]),
            env_kind=record["env"],
            steps=steps,
            final_state=np.asarray(record["final_state"], dtype=np.float64),
            termination_cause=TerminationCause(record["cause"]),
            fault=bool(record["fault"]),
            accumulated_reward=float(record["reward"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptArtifactError(f"bad episode record: {exc}") from exc
    return episode


def save_episodes(path, episodes, meta=None) -> int:
    header = {
        "kind": EPISODE_FILE_KIND,
        "version": EPISODE_FILE_VERSION,
        "count": len(episodes),
        "meta": dict(meta or {}),
    }
    return write_jsonl(path, header, (episode_to_record(e) for e in episodes))


def load_episodes(path) -> tuple[list[Episode], dict]:
    header, records = read_jsonl(path, EPISODE_FILE_KIND, EPISODE_FILE_VERSION)
    return [episode_from_record(r) for r in records], header.get("meta", {})
