"""Post-search validation by re-executing episodes against the live agent.

A recorded episode replays step by step: the agent is queried on the
simulator's state, and whenever its action deviates from the recorded one the
simulator state is replaced by the recorded state and the agent re-queried.
An episode is valid when every recorded action is recovered this way; its
final fault status comes from what the execution actually did, never from a
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agents import QNetwork, select_action
from .envs import Environment, TerminationCause
from .episodes import Episode, Step


def cosine_distance(u, v) -> float:
    """1 - cos(u, v), in [0, 2].

    Zero vectors have no direction: the distance is 0 when both are zero
    (identical) and 1 (maximal indifference) when exactly one is.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 and nv == 0.0:
        return 0.0
    if nu == 0.0 or nv == 0.0:
        return 1.0
    return float(1.0 - np.dot(u, v) / (nu * nv))


@dataclass
class ExecutionOutcome:
    valid: bool
    deviations: int
    deviation_distances: list[float]
    observed_fault: bool
    executed: Episode | None


def replay_episode(episode: Episode, net: QNetwork, env: Environment) -> ExecutionOutcome:
    """Execute a recorded episode under the state-replacement protocol.

    The simulator starts from the episode's initial state. At each step the
    agent acts on the simulator state; on a mismatch with the recorded action
    the state is replaced by the recorded one (the cosine distance between
    the two is logged) and the agent re-queried. A second mismatch marks the
    episode invalid. Execution ends at the recorded horizon or earlier if the
    environment terminates; ``observed_fault`` reports whether this execution
    hit a boundary fault.
    """
    env.set_state(episode.steps[0].state, steps_elapsed=0)
    state = env.state
    executed: list[Step] = []
    distances: list[float] = []
    valid = True
    cause = TerminationCause.NONE

    for step in episode.steps:
        action = select_action(net, state)
        if action != step.action:
            distances.append(cosine_distance(state, step.state))
            env.set_state(step.state)
            state = env.state
            action = select_action(net, state)
            if action != step.action:
                valid = False
                break
        outcome = env.step(step.action)
        executed.append(Step(state, step.action, outcome.reward))
        state = outcome.next_state
        if outcome.terminated:
            cause = outcome.termination_cause
            break

    observed_fault = cause is TerminationCause.BOUNDARY_FAULT
    executed_episode = None
    if executed:
        executed_episode = Episode(
            episode_id=episode.episode_id,
            origin=episode.origin,
            env_kind=episode.env_kind,
            steps=executed,
            final_state=state,
            termination_cause=cause,
            fault=observed_fault,
            accumulated_reward=float(sum(s.reward for s in executed)),
        )
    return ExecutionOutcome(
        valid=valid,
        deviations=len(distances),
        deviation_distances=distances,
        observed_fault=valid and observed_fault,
        executed=executed_episode,
    )


@dataclass
class ValidationReport:
    """Campaign-level replay statistics."""

    n_episodes: int = 0
    n_valid: int = 0
    n_invalid: int = 0
    n_observed_faults: int = 0
    deviation_counts: list[int] = field(default_factory=list)
    deviation_distances: list[float] = field(default_factory=list)
    distance_threshold: float = 0.25
    per_episode: list[dict] = field(default_factory=list)

    @property
    def fraction_under_threshold(self) -> float | None:
        if not self.deviation_distances:
            return None
        under = sum(1 for d in self.deviation_distances if d < self.distance_threshold)
        return under / len(self.deviation_distances)

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "n_valid": self.n_valid,
            "n_invalid": self.n_invalid,
            "n_observed_faults": self.n_observed_faults,
            "deviation_counts": self.deviation_counts,
            "deviation_distances": self.deviation_distances,
            "distance_threshold": self.distance_threshold,
            "fraction_under_threshold": self.fraction_under_threshold,
            "per_episode": self.per_episode,
        }


def validate_episodes(
    episodes, net: QNetwork, env: Environment, distance_threshold: float = 0.25
) -> tuple[ValidationReport, list[ExecutionOutcome]]:
    """Replay a batch of episodes and aggregate deviation statistics."""
    report = ValidationReport(distance_threshold=distance_threshold)
    outcomes = []
    for episode in episodes:
        outcome = replay_episode(episode, net, env)
        outcomes.append(outcome)
        report.n_episodes += 1
        report.n_valid += int(outcome.valid)
        report.n_invalid += int(not outcome.valid)
        report.n_observed_faults += int(outcome.observed_fault)
        report.deviation_counts.append(outcome.deviations)
        report.deviation_distances.extend(outcome.deviation_distances)
        report.per_episode.append(
            {
                "id": episode.episode_id,
                "origin": episode.origin.value,
                "valid": outcome.valid,
                "deviations": outcome.deviations,
                "observed_fault": outcome.observed_fault,
            }
        )
    return report, outcomes
