import math

import numpy as np
import pytest

from rlfault.agents import greedy_policy
from rlfault.envs import EnvironmentConfig, TerminationCause, make_env
from rlfault.episodes import run_random_episodes
from rlfault.replay import cosine_distance, replay_episode, validate_episodes
from rlfault.search import splice_episodes


class TestCosineDistance:
    def test_identical_nonzero_vectors(self):
        v = np.array([0.3, -0.2, 1.0])
        assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_vectors(self):
        assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)

    def test_closed_form_value(self):
        got = cosine_distance([1.0, 0.0], [1.0, 1.0])
        assert got == pytest.approx(1.0 - 1.0 / math.sqrt(2.0), abs=1e-12)

    def test_opposite_vectors_are_two(self):
        assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(2.0)

    def test_zero_vector_conventions(self):
        assert cosine_distance([0.0, 0.0], [0.0, 0.0]) == 0.0
        assert cosine_distance([0.0, 0.0], [1.0, 0.0]) == 1.0
        assert cosine_distance([1.0, 0.0], [0.0, 0.0]) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            cosine_distance([1.0], [1.0, 2.0])


class TestReplayEpisode:
    def test_unmodified_episode_replays_clean(self, cartpole_net):
        env = make_env(EnvironmentConfig(kind="cartpole", seed=0))
        policy = greedy_policy(cartpole_net)
        episodes = run_random_episodes(env, policy, 20, np.random.default_rng(0))
        for episode in episodes:
            outcome = replay_episode(episode, cartpole_net, env)
            assert outcome.valid
            assert outcome.deviations == 0
            assert outcome.observed_fault == episode.fault
            assert outcome.executed.accumulated_reward == episode.accumulated_reward
            assert np.array_equal(outcome.executed.final_state, episode.final_state)

    def test_replay_is_idempotent(self, cartpole_net):
        env = make_env(EnvironmentConfig(kind="cartpole", seed=1))
        policy = greedy_policy(cartpole_net)
        episode = run_random_episodes(env, policy, 1, np.random.default_rng(1))[0]
        first = replay_episode(episode, cartpole_net, env)
        second = replay_episode(first.executed, cartpole_net, env)
        assert second.valid and second.deviations == 0
        assert np.array_equal(second.executed.final_state, first.executed.final_state)

    def test_spliced_episode_recovers_via_replacement(self, cartpole_net):
        """A crossover offspring deviates at most around the splice point and
        must recover through state replacement (recorded states come from
        real executions of the same policy)."""
        env = make_env(EnvironmentConfig(kind="cartpole", seed=2))
        policy = greedy_policy(cartpole_net)
        episodes = run_random_episodes(env, policy, 30, np.random.default_rng(2))
        from rlfault.abstraction import state_keys

        spliced = None
        for parent in episodes:
            keys_p = state_keys(parent.step_states(), cartpole_net, 1.0)
            for match in episodes:
                if match.episode_id == parent.episode_id:
                    continue
                keys_m = state_keys(match.step_states(), cartpole_net, 1.0)
                hits = [
                    (f, v)
                    for f in range(len(parent))
                    for v in range(len(match))
                    if keys_p[f] == keys_m[v]
                    and parent.steps[f].action == match.steps[v].action
                ]
                if hits:
                    f, v = hits[0]
                    spliced = splice_episodes(parent, f, match, v, "a", "b")[0]
                    break
            if spliced:
                break
        assert spliced is not None, "fixture should find at least one key match"
        outcome = replay_episode(spliced, cartpole_net, env)
        assert outcome.valid
        assert outcome.observed_fault == (
            outcome.executed.termination_cause is TerminationCause.BOUNDARY_FAULT
        )

    def test_observed_fault_is_post_hoc_checkable(self, cartpole_net):
        # Starts near the right border so that drift faults actually occur.
        config = EnvironmentConfig(
            kind="cartpole",
            seed=3,
            initial_ranges=((2.25, 2.39), (0.5, 2.0), (-0.02, 0.02), (-0.05, 0.05)),
        )
        env = make_env(config)
        policy = greedy_policy(cartpole_net)
        episodes = run_random_episodes(env, policy, 50, np.random.default_rng(3))
        seen_fault = False
        for episode in episodes:
            outcome = replay_episode(episode, cartpole_net, env)
            if outcome.observed_fault:
                seen_fault = True
                assert abs(outcome.executed.final_state[0]) > 2.4
        # untrained nets drift; at least one boundary fault is expected here
        assert seen_fault

    def test_inconsistent_recorded_actions_invalid(self, cartpole_net):
        env = make_env(EnvironmentConfig(kind="cartpole", seed=4))
        policy = greedy_policy(cartpole_net)
        episode = run_random_episodes(env, policy, 1, np.random.default_rng(4))[0]
        # Flip one recorded action: replacement cannot recover it because the
        # recorded state itself selects the original action.
        flipped = episode.steps[len(episode) // 2]
        episode.steps[len(episode) // 2] = type(flipped)(
            flipped.state, 1 - flipped.action, flipped.reward
        )
        outcome = replay_episode(episode, cartpole_net, env)
        assert not outcome.valid
        assert not outcome.observed_fault


class TestValidationReport:
    def test_campaign_statistics(self, cartpole_net):
        env = make_env(EnvironmentConfig(kind="cartpole", seed=5))
        policy = greedy_policy(cartpole_net)
        episodes = run_random_episodes(env, policy, 10, np.random.default_rng(5))
        report, outcomes = validate_episodes(episodes, cartpole_net, env)
        assert report.n_episodes == 10
        assert report.n_valid == 10
        assert report.n_invalid == 0
        assert report.deviation_counts == [0] * 10
        assert report.fraction_under_threshold is None
        assert len(outcomes) == 10
        payload = report.to_dict()
        assert payload["n_valid"] == 10

    def test_fraction_under_threshold(self):
        from rlfault.replay import ValidationReport

        report = ValidationReport(deviation_distances=[0.1, 0.2, 0.3], distance_threshold=0.25)
        assert report.fraction_under_threshold == pytest.approx(2 / 3)
