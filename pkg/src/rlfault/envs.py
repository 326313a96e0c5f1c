"""Native, seedable simulations of the two benchmark control problems.

Both environments integrate the canonical dynamics with explicit Euler steps
and expose the hooks the search needs: setting the simulator to an arbitrary
state, bounded random perturbation of states, and a termination cause that
distinguishes expected endings from boundary violations (functional faults).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .base import check_rng, check_state

CARTPOLE = "cartpole"
MOUNTAIN_CAR = "mountain_car"


class TerminationCause(str, Enum):
    NONE = "none"
    TIME_LIMIT = "time_limit"
    GOAL = "goal"
    ANGLE_LIMIT = "angle_limit"
    BOUNDARY_FAULT = "boundary_fault"


@dataclass(frozen=True)
class StepOutcome:
    next_state: np.ndarray
    reward: float
    terminated: bool
    termination_cause: TerminationCause


def is_functional_fault(outcome: StepOutcome) -> bool:
    """A functional fault is a termination caused by crossing a track border.

    Pole-angle and time-limit endings are expected behaviour; reaching the
    Mountain Car goal is the task objective.
    """
    return outcome.termination_cause is TerminationCause.BOUNDARY_FAULT


@dataclass(frozen=True)
class EnvironmentConfig:
    """Environment selection plus the knobs the search is allowed to turn.

    ``initial_ranges`` holds one (low, high) interval per observation feature;
    episodes start from a uniform draw over the box. Leaving it ``None``
    selects the benchmark defaults. Widening the box is how "randomly change
    the alterable parameters" is realised for these environments.
    """

    kind: str = CARTPOLE
    max_steps: int = 200
    initial_ranges: tuple[tuple[float, float], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (CARTPOLE, MOUNTAIN_CAR):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.initial_ranges is not None:
            ranges = tuple(tuple(float(v) for v in r) for r in self.initial_ranges)
            for lo, hi in ranges:
                if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                    raise ValueError(f"invalid initial range ({lo}, {hi})")
            object.__setattr__(self, "initial_ranges", ranges)

    def to_dict(self):
        return {
            "kind": self.kind,
            "max_steps": self.max_steps,
            "initial_ranges": self.initial_ranges,
            "seed": self.seed,
        }


class Environment:
    """Deterministic simulator core shared by both benchmarks.

    A single instance is single-threaded; run independent instances (with
    independent RNG streams) for parallelism.
    """

    OBS_DIM: int = 0
    N_ACTIONS: int = 0
    # Physically valid box per feature; perturbed states are clamped into it.
    FEATURE_LOW: np.ndarray
    FEATURE_HIGH: np.ndarray
    DEFAULT_INITIAL_RANGES: tuple[tuple[float, float], ...]

    def __init__(self, config: EnvironmentConfig | None = None):
        self.config = config or EnvironmentConfig(kind=self.kind())
        if self.config.kind != self.kind():
            raise ValueError(
                f"config is for {self.config.kind!r}, not {self.kind()!r}"
            )
        ranges = self.config.initial_ranges or self.DEFAULT_INITIAL_RANGES
        if len(ranges) != self.OBS_DIM:
            raise ValueError(
                f"expected {self.OBS_DIM} initial ranges, got {len(ranges)}"
            )
        self._initial_ranges = np.asarray(ranges, dtype=np.float64)
        self._rng = np.random.default_rng(self.config.seed)
        self._state = np.zeros(self.OBS_DIM)
        self._steps = 0
        self._terminated = False

    @classmethod
    def kind(cls) -> str:
        raise NotImplementedError

    @property
    def state(self) -> np.ndarray:
        return self._state.copy()

    @property
    def steps(self) -> int:
        return self._steps

    def reset(self, rng=None) -> np.ndarray:
        """Draw an initial state uniformly from the configured per-feature box."""
        rng = self._rng if rng is None else check_rng(rng)
        lo = self._initial_ranges[:, 0]
        hi = self._initial_ranges[:, 1]
        self._state = lo + (hi - lo) * rng.uniform(size=self.OBS_DIM)
        self._steps = 0
        self._terminated = False
        return self.state

    def set_state(self, s, steps_elapsed: int | None = None) -> None:
        """Force the simulator into state ``s``.

        The step counter is left unchanged unless ``steps_elapsed`` is given
        (the mutation operator uses it so a spliced episode still honours the
        overall step limit).
        """
        self._state = check_state(s, self.OBS_DIM)
        if steps_elapsed is not None:
            self._steps = int(steps_elapsed)
        self._terminated = False

    def step(self, action: int) -> StepOutcome:
        if self._terminated:
            raise RuntimeError("step() called on a terminated episode; reset first")
        action = int(action)
        if not 0 <= action < self.N_ACTIONS:
            raise ValueError(f"action must be in [0, {self.N_ACTIONS}), got {action}")
        next_state, reward = self._integrate(self._state, action)
        self._state = next_state
        self._steps += 1
        cause = self._termination_cause(next_state)
        if cause is TerminationCause.NONE and self._steps >= self.config.max_steps:
            cause = TerminationCause.TIME_LIMIT
        self._terminated = cause is not TerminationCause.NONE
        return StepOutcome(self.state, reward, self._terminated, cause)

    def perturb_state(self, s, magnitudes=None, rng=None) -> np.ndarray:
        """Add uniform noise in ±magnitudes per feature, clamped to the valid box."""
        s = check_state(s, self.OBS_DIM)
        rng = self._rng if rng is None else check_rng(rng)
        if magnitudes is None:
            magnitudes = self.default_perturbation()
        mags = np.asarray(magnitudes, dtype=np.float64)
        if mags.shape != (self.OBS_DIM,):
            raise ValueError(
                f"magnitudes must have shape ({self.OBS_DIM},), got {mags.shape}"
            )
        if np.any(mags < 0):
            raise ValueError("magnitudes must be non-negative")
        noise = rng.uniform(-1.0, 1.0, size=self.OBS_DIM) * mags
        return np.clip(s + noise, self.FEATURE_LOW, self.FEATURE_HIGH)

    @classmethod
    def default_perturbation(cls) -> np.ndarray:
        # 5% of each feature's valid span: small enough to stay realistic.
        return 0.05 * (cls.FEATURE_HIGH - cls.FEATURE_LOW)

    def _integrate(self, s, action):
        raise NotImplementedError

    def _termination_cause(self, s) -> TerminationCause:
        raise NotImplementedError


class CartPoleEnv(Environment):
    """Pole balancing on a moving cart; crossing |x| > 2.4 is the fault.

    Termination by pole angle is the expected failure mode of the task, so it
    is not a functional fault. Left and right borders are treated
    symmetrically.
    """

    OBS_DIM = 4
    N_ACTIONS = 2

    GRAVITY = 9.8
    CART_MASS = 1.0
    POLE_MASS = 0.1
    TOTAL_MASS = CART_MASS + POLE_MASS
    HALF_POLE_LENGTH = 0.5
    POLEMASS_LENGTH = POLE_MASS * HALF_POLE_LENGTH
    FORCE_MAG = 10.0
    TAU = 0.02

    X_LIMIT = 2.4
    ANGLE_LIMIT = 12.0 * 2.0 * math.pi / 360.0  # 0.2094395... rad

    FEATURE_LOW = np.array([-2.4, -3.0, -ANGLE_LIMIT, -3.0])
    FEATURE_HIGH = np.array([2.4, 3.0, ANGLE_LIMIT, 3.0])
    DEFAULT_INITIAL_RANGES = ((-0.05, 0.05),) * 4

    @classmethod
    def kind(cls):
        return CARTPOLE

    def _integrate(self, s, action):
        x, x_dot, theta, theta_dot = s
        force = self.FORCE_MAG if action == 1 else -self.FORCE_MAG
        sin_t = math.sin(theta)
        cos_t = math.cos(theta)
        temp = (force + self.POLEMASS_LENGTH * theta_dot**2 * sin_t) / self.TOTAL_MASS
        theta_acc = (self.GRAVITY * sin_t - cos_t * temp) / (
            self.HALF_POLE_LENGTH
            * (4.0 / 3.0 - self.POLE_MASS * cos_t**2 / self.TOTAL_MASS)
        )
        x_acc = temp - self.POLEMASS_LENGTH * theta_acc * cos_t / self.TOTAL_MASS
        nxt = np.array(
            [
                x + self.TAU * x_dot,
                x_dot + self.TAU * x_acc,
                theta + self.TAU * theta_dot,
                theta_dot + self.TAU * theta_acc,
            ]
        )
        return nxt, 1.0

    def _termination_cause(self, s):
        if abs(s[0]) > self.X_LIMIT:
            return TerminationCause.BOUNDARY_FAULT
        if abs(s[2]) > self.ANGLE_LIMIT:
            return TerminationCause.ANGLE_LIMIT
        return TerminationCause.NONE


class MountainCarEnv(Environment):
    """Under-powered car in a valley; crossing the left border is the fault.

    This is the custom variant where the episode terminates (instead of
    bouncing) when the car reaches x <= -1.2.
    """

    OBS_DIM = 2
    N_ACTIONS = 3

    FORCE = 0.001
    GRAVITY_SCALE = 0.0025
    MIN_POSITION = -1.2
    MAX_POSITION = 0.6
    MAX_SPEED = 0.07
    GOAL_POSITION = 0.5

    FEATURE_LOW = np.array([MIN_POSITION, -MAX_SPEED])
    FEATURE_HIGH = np.array([MAX_POSITION, MAX_SPEED])
    DEFAULT_INITIAL_RANGES = ((-0.6, -0.4), (0.0, 0.0))

    @classmethod
    def kind(cls):
        return MOUNTAIN_CAR

    def _integrate(self, s, action):
        position, velocity = s
        velocity += (action - 1) * self.FORCE - self.GRAVITY_SCALE * math.cos(
            3.0 * position
        )
        velocity = min(max(velocity, -self.MAX_SPEED), self.MAX_SPEED)
        position += velocity
        position = min(max(position, self.MIN_POSITION), self.MAX_POSITION)
        if position <= self.MIN_POSITION and velocity < 0.0:
            velocity = 0.0
        return np.array([position, velocity]), -1.0

    def _termination_cause(self, s):
        if s[0] >= self.GOAL_POSITION:
            return TerminationCause.GOAL
        if s[0] <= self.MIN_POSITION:
            return TerminationCause.BOUNDARY_FAULT
        return TerminationCause.NONE


_ENV_CLASSES = {CARTPOLE: CartPoleEnv, MOUNTAIN_CAR: MountainCarEnv}


def env_class(kind: str):
    try:
        return _ENV_CLASSES[kind]
    except KeyError:
        raise ValueError(f"unknown environment kind {kind!r}") from None


def make_env(config: EnvironmentConfig) -> Environment:
    return env_class(config.kind)(config)
