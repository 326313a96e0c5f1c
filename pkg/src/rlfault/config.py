"""Campaign configuration: one JSON file drives the whole pipeline.

Every stage derives its RNG seed deterministically from the global seed and
the stage name, and every artifact written embeds the SHA-256 hash of the
canonical config so downstream stages can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .agents import TrainConfig
from .envs import EnvironmentConfig
from .search import FitnessThresholds, SearchConfig
from .store import dump_json


class ConfigError(Exception):
    """Malformed campaign configuration; the message names path and field."""


_STAGE_TAGS = {
    "train-agent": 1,
    "collect": 2,
    "build-index": 3,
    "train-classifier": 4,
    "search": 5,
    "validate": 6,
    "baseline": 7,
    "rq1": 8,
    "rq2": 9,
    "rq3": 10,
    "eval": 11,
}


def stage_seed(global_seed: int, stage: str) -> int:
    seq = np.random.SeedSequence([global_seed, _STAGE_TAGS[stage]])
    return int(seq.generate_state(1)[0])


def config_hash(raw: dict) -> str:
    return hashlib.sha256(dump_json(raw).encode()).hexdigest()[:16]


class _Section:
    """Typed view over one config section with path-aware error messages."""

    def __init__(self, path: str, name: str, data: dict):
        self._path = path
        self._name = name
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: section {name!r} must be an object")
        self._data = data

    def get(self, key, kind, default=..., optional=False):
        if key not in self._data:
            if default is not ...:
                return default
            raise ConfigError(f"{self._path}: missing field {self._name}.{key}")
        value = self._data[key]
        if value is None and optional:
            return None
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            raise ConfigError(
                f"{self._path}: field {self._name}.{key} must be {kind.__name__}, "
                f"got {type(value).__name__}"
            )
        return value


@dataclass
class CampaignConfig:
    path: str
    raw: dict
    seed: int
    out_dir: Path
    environment: EnvironmentConfig
    train: TrainConfig
    train_initial_ranges: tuple | None
    eval_episodes: int
    abstraction_level: float
    dataset_random: int
    dataset_training: int
    classifier_trees: int
    classifier_train_fraction: float
    search: SearchConfig
    thresholds: FitnessThresholds
    runs: int
    resamples: int
    baseline_episodes: int
    rq2_levels: tuple[float, ...]
    rq2_trees: int
    kfold: int
    rq3_level: float | None

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def meta(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed}


def _ranges_tuple(value, path, name):
    if value is None:
        return None
    try:
        ranges = tuple((float(lo), float(hi)) for lo, hi in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: field {name} must be a list of [low, high] pairs") from exc
    return ranges


def load_campaign_config(path, seed_override=None, out_override=None) -> CampaignConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if seed_override is not None:
        raw = dict(raw, seed=int(seed_override))
    return parse_campaign_config(raw, str(path), out_override)


def parse_campaign_config(raw: dict, path: str, out_override=None) -> CampaignConfig:
    top = _Section(path, "top-level", raw)
    seed = top.get("seed", int)
    out_dir = Path(out_override) if out_override else Path(top.get("out_dir", str))

    env_s = _Section(path, "environment", top.get("environment", dict))
    try:
        environment = EnvironmentConfig(
            kind=env_s.get("kind", str),
            max_steps=env_s.get("max_steps", int, default=200),
            initial_ranges=_ranges_tuple(
                env_s.get("initial_ranges", list, default=None, optional=True),
                path,
                "environment.initial_ranges",
            ),
            seed=stage_seed(seed, "collect"),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: environment: {exc}") from exc

    ag = _Section(path, "agent", top.get("agent", dict))
    agent_seed = ag.get("seed", int, default=None, optional=True)
    if agent_seed is None:
        agent_seed = stage_seed(seed, "train-agent")
    try:
        train = TrainConfig(
            total_timesteps=ag.get("total_timesteps", int),
            replay_capacity=ag.get("replay_capacity", int, default=50_000),
            batch_size=ag.get("batch_size", int, default=64),
            gamma=ag.get("gamma", float, default=0.99),
            learning_rate=ag.get("learning_rate", float, default=0.01),
            target_sync=ag.get("target_sync", int, default=500),
            eps_start=ag.get("eps_start", float, default=1.0),
            eps_end=ag.get("eps_end", float, default=0.05),
            eps_decay_fraction=ag.get("eps_decay_fraction", float, default=0.1),
            hidden_sizes=tuple(ag.get("hidden_sizes", list, default=[64, 64])),
            grad_clip=ag.get("grad_clip", float, default=10.0, optional=True),
            learn_start=ag.get("learn_start", int, default=1_000),
            train_every=ag.get("train_every", int, default=1),
            normalize_inputs=ag.get("normalize_inputs", bool, default=True),
            seed=agent_seed,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: agent: {exc}") from exc
    train_initial_ranges = _ranges_tuple(
        ag.get("train_initial_ranges", list, default=None, optional=True),
        path,
        "agent.train_initial_ranges",
    )
    eval_episodes = ag.get("eval_episodes", int, default=100)

    ab = _Section(path, "abstraction", top.get("abstraction", dict))
    level = ab.get("level", float)
    if level <= 0:
        raise ConfigError(f"{path}: field abstraction.level must be positive")

    ds = _Section(path, "dataset", top.get("dataset", dict))
    dataset_random = ds.get("random_episodes", int)
    dataset_training = ds.get("training_episodes", int)
    if dataset_random < 1 or dataset_training < 0:
        raise ConfigError(f"{path}: dataset sizes must be positive")

    cl = _Section(path, "classifier", top.get("classifier", dict, default={}))
    classifier_trees = cl.get("n_trees", int, default=100)
    classifier_train_fraction = cl.get("train_fraction", float, default=0.7)

    se = _Section(path, "search", top.get("search", dict))
    mags = se.get("mutation_magnitudes", list, default=None, optional=True)
    try:
        search = SearchConfig(
            population_size=se.get("population_size", int),
            generations=se.get("generations", int, default=10),
            crossover_rate=se.get("crossover_rate", float, default=0.75),
            tournament_k=se.get("tournament_k", int, default=2),
            match_retries=se.get("match_retries", int, default=50),
            mutation_magnitudes=None if mags is None else tuple(float(m) for m in mags),
            temperature=se.get("temperature", float, default=1.0),
            seed=stage_seed(seed, "search"),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: search: {exc}") from exc

    th = _Section(path, "thresholds", top.get("thresholds", dict))
    try:
        thresholds = FitnessThresholds(
            reward_max=th.get("reward_max", float),
            fault_prob_min=th.get("fault_prob_min", float, default=0.95),
            certainty_max=th.get("certainty_max", float, default=0.04),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: thresholds: {exc}") from exc

    ex = _Section(path, "experiments", top.get("experiments", dict))
    runs = ex.get("runs", int, default=10)
    resamples = ex.get("resamples", int, default=100)
    baseline_episodes = ex.get("baseline_episodes", int, default=10_000)
    rq2_levels = tuple(float(v) for v in ex.get("rq2_levels", list))
    rq2_trees = ex.get("rq2_trees", int, default=40)
    kfold = ex.get("kfold", int, default=5)
    rq3_level = ex.get("rq3_level", float, default=None, optional=True)
    if rq3_level is not None and rq3_level <= 0:
        raise ConfigError(f"{path}: field experiments.rq3_level must be positive")
    if runs < 1 or resamples < 1 or baseline_episodes < 1:
        raise ConfigError(f"{path}: experiments counts must be >= 1")
    if not rq2_levels or any(v <= 0 for v in rq2_levels):
        raise ConfigError(f"{path}: field experiments.rq2_levels must be positive")

    return CampaignConfig(
        path=path,
        raw=raw,
        seed=seed,
        out_dir=out_dir,
        environment=environment,
        train=train,
        train_initial_ranges=train_initial_ranges,
        eval_episodes=eval_episodes,
        abstraction_level=level,
        dataset_random=dataset_random,
        dataset_training=dataset_training,
        classifier_trees=classifier_trees,
        classifier_train_fraction=classifier_train_fraction,
        search=search,
        thresholds=thresholds,
        runs=runs,
        resamples=resamples,
        baseline_episodes=baseline_episodes,
        rq2_levels=rq2_levels,
        rq2_trees=rq2_trees,
        kfold=kfold,
        rq3_level=rq3_level,
    )


def preset_path(name: str) -> Path:
    """Path of a bundled campaign preset ("cartpole" or "mountain_car")."""
    candidate = resources.files("rlfault").joinpath("presets", f"{name}.json")
    with resources.as_file(candidate) as p:
        return Path(p)
