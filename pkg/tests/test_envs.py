import math

import numpy as np
import pytest

from rlfault.envs import (
    CartPoleEnv,
    EnvironmentConfig,
    MountainCarEnv,
    TerminationCause,
    is_functional_fault,
    make_env,
)

# Hand evaluation of one explicit Euler step from (0,0,0,0) under force +10:
#   temp      = 10 / 1.1
#   theta_acc = -temp / (0.5 * (4/3 - 0.1/1.1))
#   x_acc     = temp - 0.05 * theta_acc / 1.1
_TEMP = 10.0 / 1.1
_THETA_ACC = -_TEMP / (0.5 * (4.0 / 3.0 - 0.1 / 1.1))
_X_ACC = _TEMP - 0.05 * _THETA_ACC / 1.1


class TestReset:
    def test_degenerate_ranges_give_exact_point(self):
        config = EnvironmentConfig(kind="cartpole", initial_ranges=((0.0, 0.0),) * 4)
        env = CartPoleEnv(config)
        assert np.array_equal(env.reset(), np.zeros(4))

    def test_same_seed_fresh_instances_identical(self):
        config = EnvironmentConfig(kind="cartpole", seed=42)
        s1 = CartPoleEnv(config).reset()
        s2 = CartPoleEnv(config).reset()
        assert np.array_equal(s1, s2)

    def test_mountain_car_default_ranges(self, mountain_car):
        # Range-membership oracle over 1,000 draws.
        rng = np.random.default_rng(1)
        for _ in range(1000):
            state = mountain_car.reset(rng)
            assert -0.6 <= state[0] <= -0.4
            assert state[1] == 0.0

    def test_reset_zeroes_step_counter(self, cartpole):
        cartpole.reset()
        cartpole.step(0)
        assert cartpole.steps == 1
        cartpole.reset()
        assert cartpole.steps == 0


class TestSetState:
    def test_setter_reads_back_exactly(self, cartpole):
        s = np.array([0.1, -0.2, 0.03, 0.5])
        cartpole.set_state(s)
        assert np.array_equal(cartpole.state, s)

    def test_dynamics_are_stateless(self, cartpole):
        """set_state then step matches stepping a fresh env initialised at s."""
        s = np.array([0.3, -0.1, 0.05, 0.2])
        cartpole.reset()
        cartpole.step(1)
        cartpole.set_state(s, steps_elapsed=0)
        out_a = cartpole.step(0)

        fresh = CartPoleEnv(EnvironmentConfig(kind="cartpole"))
        fresh.set_state(s, steps_elapsed=0)
        out_b = fresh.step(0)
        assert np.array_equal(out_a.next_state, out_b.next_state)
        assert out_a.termination_cause == out_b.termination_cause

    def test_counter_unchanged_by_default(self, cartpole):
        cartpole.reset()
        cartpole.step(0)
        cartpole.set_state(np.zeros(4))
        assert cartpole.steps == 1

    def test_dimension_error(self, cartpole):
        with pytest.raises(ValueError, match="dimension"):
            cartpole.set_state([0.0, 0.0, 0.0])

    def test_non_finite_error(self, cartpole):
        with pytest.raises(ValueError, match="finite"):
            cartpole.set_state([0.0, np.nan, 0.0, 0.0])


class TestStep:
    def test_cartpole_euler_hand_values(self, cartpole):
        cartpole.set_state([0.0, 0.0, 0.0, 0.0], steps_elapsed=0)
        out = cartpole.step(1)
        expected = np.array([0.0, 0.02 * _X_ACC, 0.0, 0.02 * _THETA_ACC])
        assert np.all(np.abs(out.next_state - expected) < 1e-12)
        assert out.reward == 1.0
        assert not out.terminated

    def test_cartpole_left_force_mirrors_right(self, cartpole):
        cartpole.set_state([0.0, 0.0, 0.0, 0.0], steps_elapsed=0)
        out = cartpole.step(0)
        expected = np.array([0.0, -0.02 * _X_ACC, 0.0, -0.02 * _THETA_ACC])
        assert np.all(np.abs(out.next_state - expected) < 1e-12)

    def test_mountain_car_hand_values(self, mountain_car):
        mountain_car.set_state([-0.5, 0.0], steps_elapsed=0)
        out = mountain_car.step(2)
        v = 0.001 - 0.0025 * math.cos(-1.5)
        assert abs(out.next_state[1] - v) < 1e-12
        assert abs(out.next_state[0] - (-0.5 + v)) < 1e-12
        assert out.reward == -1.0

    def test_cartpole_boundary_fault(self, cartpole):
        # Positioned so that one step of drift crosses |x| > 2.4.
        cartpole.set_state([2.399, 2.0, 0.0, 0.0], steps_elapsed=0)
        out = cartpole.step(1)
        assert out.terminated
        assert out.termination_cause is TerminationCause.BOUNDARY_FAULT
        assert abs(out.next_state[0]) > 2.4

    def test_cartpole_left_border_is_also_fault(self, cartpole):
        cartpole.set_state([-2.399, -2.0, 0.0, 0.0], steps_elapsed=0)
        out = cartpole.step(0)
        assert out.termination_cause is TerminationCause.BOUNDARY_FAULT

    def test_cartpole_angle_limit(self, cartpole):
        cartpole.set_state([0.0, 0.0, 0.207, 2.0], steps_elapsed=0)
        out = cartpole.step(1)
        assert out.termination_cause is TerminationCause.ANGLE_LIMIT

    def test_mountain_car_left_border_fault(self, mountain_car):
        mountain_car.set_state([-1.195, -0.05], steps_elapsed=0)
        out = mountain_car.step(0)
        assert out.terminated
        assert out.termination_cause is TerminationCause.BOUNDARY_FAULT
        assert out.next_state[0] <= -1.2

    def test_mountain_car_goal(self, mountain_car):
        mountain_car.set_state([0.45, 0.07], steps_elapsed=0)
        out = mountain_car.step(2)
        assert out.termination_cause is TerminationCause.GOAL

    def test_time_limit(self):
        env = CartPoleEnv(EnvironmentConfig(kind="cartpole", max_steps=3))
        env.set_state([0.0, 0.0, 0.0, 0.0], steps_elapsed=0)
        causes = [env.step(i % 2).termination_cause for i in range(3)]
        assert causes == [
            TerminationCause.NONE,
            TerminationCause.NONE,
            TerminationCause.TIME_LIMIT,
        ]

    def test_invalid_action(self, cartpole, mountain_car):
        cartpole.reset()
        with pytest.raises(ValueError, match="action"):
            cartpole.step(2)
        mountain_car.reset()
        with pytest.raises(ValueError, match="action"):
            mountain_car.step(3)

    def test_step_after_termination_errors(self, cartpole):
        cartpole.set_state([2.399, 2.0, 0.0, 0.0], steps_elapsed=0)
        assert cartpole.step(1).terminated
        with pytest.raises(RuntimeError, match="terminated"):
            cartpole.step(1)


class TestFaultPredicate:
    def test_enumeration_of_causes(self):
        from rlfault.envs import StepOutcome

        def outcome(cause):
            return StepOutcome(np.zeros(4), 1.0, cause != TerminationCause.NONE, cause)

        assert is_functional_fault(outcome(TerminationCause.BOUNDARY_FAULT))
        assert not is_functional_fault(outcome(TerminationCause.ANGLE_LIMIT))
        assert not is_functional_fault(outcome(TerminationCause.TIME_LIMIT))
        assert not is_functional_fault(outcome(TerminationCause.GOAL))
        assert not is_functional_fault(outcome(TerminationCause.NONE))


class TestPerturbState:
    def test_zero_magnitudes_identity(self, cartpole):
        s = np.array([0.2, 0.1, -0.05, 0.3])
        out = cartpole.perturb_state(s, np.zeros(4), np.random.default_rng(0))
        assert np.array_equal(out, s)

    def test_range_membership_oracle(self, cartpole):
        s = np.array([0.5, 0.0, 0.01, -0.2])
        mags = np.array([0.1, 0.2, 0.005, 0.05])
        rng = np.random.default_rng(9)
        for _ in range(10_000):
            out = cartpole.perturb_state(s, mags, rng)
            assert np.all(out >= s - mags - 1e-15)
            assert np.all(out <= s + mags + 1e-15)

    def test_mountain_car_velocity_clamped(self, mountain_car):
        s = np.array([-0.5, 0.069])
        mags = np.array([0.0, 0.05])
        rng = np.random.default_rng(3)
        hit_clamp = False
        for _ in range(2_000):
            out = mountain_car.perturb_state(s, mags, rng)
            assert -0.07 <= out[1] <= 0.07
            hit_clamp = hit_clamp or out[1] == 0.07
        assert hit_clamp  # the clamp must actually engage for this setup

    def test_default_magnitudes_are_5_percent_of_span(self):
        span = CartPoleEnv.FEATURE_HIGH - CartPoleEnv.FEATURE_LOW
        assert np.allclose(CartPoleEnv.default_perturbation(), 0.05 * span)

    def test_dimension_mismatch(self, cartpole):
        with pytest.raises(ValueError):
            cartpole.perturb_state(np.zeros(4), np.zeros(3), np.random.default_rng(0))


class TestTrajectoryProperties:
    def test_deterministic_trajectories(self):
        config = EnvironmentConfig(kind="cartpole", seed=5)

        def rollout():
            env = CartPoleEnv(config)
            state = env.reset()
            states = [state]
            for i in range(50):
                out = env.step(i % 2)
                states.append(out.next_state)
                if out.terminated:
                    break
            return np.vstack(states)

        assert np.array_equal(rollout(), rollout())

    @pytest.mark.parametrize("kind,sign", [("cartpole", 1.0), ("mountain_car", -1.0)])
    def test_reward_equals_signed_length(self, kind, sign):
        env = make_env(EnvironmentConfig(kind=kind, seed=2))
        rng = np.random.default_rng(0)
        for _ in range(20):
            env.reset(rng)
            total, steps = 0.0, 0
            while True:
                out = env.step(int(rng.integers(env.N_ACTIONS)))
                total += out.reward
                steps += 1
                if out.terminated:
                    break
            assert total == sign * steps
            assert steps <= env.config.max_steps

    def test_boundary_fault_checkable_post_hoc(self):
        env = CartPoleEnv(EnvironmentConfig(kind="cartpole", seed=8))
        rng = np.random.default_rng(4)
        seen = 0
        for _ in range(300):
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            env.set_state(
                [side * rng.uniform(2.36, 2.399), side * rng.uniform(0, 2), 0.0, 0.0], 0
            )
            out = env.step(int(rng.integers(2)))
            if out.termination_cause is TerminationCause.BOUNDARY_FAULT:
                assert abs(out.next_state[0]) > 2.4
                seen += 1
        assert seen > 100

    def test_mountain_car_terminal_state_violates_border(self):
        env = MountainCarEnv(EnvironmentConfig(kind="mountain_car", seed=8))
        env.set_state([-1.15, -0.07], steps_elapsed=0)
        while True:
            out = env.step(0)
            if out.terminated:
                break
        assert out.termination_cause is TerminationCause.BOUNDARY_FAULT
        assert out.next_state[0] <= -1.2


class TestConfigValidation:
    def test_bad_kind(self):
        with pytest.raises(ValueError, match="kind"):
            EnvironmentConfig(kind="pendulum")

    def test_bad_max_steps(self):
        with pytest.raises(ValueError, match="max_steps"):
            EnvironmentConfig(kind="cartpole", max_steps=0)

    def test_bad_range(self):
        with pytest.raises(ValueError, match="range"):
            EnvironmentConfig(kind="cartpole", initial_ranges=((1.0, -1.0),) * 4)

    def test_wrong_range_count(self):
        config = EnvironmentConfig(kind="cartpole", initial_ranges=((0.0, 0.1),) * 3)
        with pytest.raises(ValueError, match="ranges"):
            CartPoleEnv(config)
