"""Command-line pipeline: one subcommand per stage, one config per campaign.

Stages communicate through files in the campaign's output directory; every
artifact embeds the config hash and global seed, and stages refuse inputs
produced under a different config unless ``--force`` is given. Exit codes:
0 success, 1 validation/prerequisite failure, 2 config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .abstraction import AbstractionIndex
from .agents import (
    TrainConfig,
    evaluate_policy,
    greedy_policy,
    load_agent,
    save_agent,
    train_dqn,
)
from .classifier import FaultForest, accuracy, load_forest, precision_recall_f1, save_forest
from .config import CampaignConfig, ConfigError, load_campaign_config, stage_seed
from .envs import EnvironmentConfig, make_env
from .episodes import (
    EpisodeOrigin,
    collect_states,
    encode_episodes,
    load_episodes,
    run_random_episodes,
    sample_training_episodes,
    save_episodes,
)
from .experiments import (
    SCENARIOS,
    run_campaigns,
    rq1_report,
    run_rq2_sweep,
    run_rq3,
    split_indices,
)
from .replay import validate_episodes
from .search import SearchContext, run_search
from .store import ArtifactError, write_json_artifact


class StageError(Exception):
    """Missing prerequisite or failed validation; exits with code 1."""


ARTIFACTS = {
    "agent": ("agent.json", "train-agent"),
    "training_log": ("training_log.jsonl", "train-agent"),
    "random_episodes": ("random_episodes.jsonl", "collect"),
    "ml_dataset": ("ml_dataset.jsonl", "build-index"),
    "index": ("index.json", "build-index"),
    "forest": ("forest.json", "train-classifier"),
    "classifier_metrics": ("classifier_metrics.json", "train-classifier"),
    "archive": ("archive.jsonl", "search"),
    "search_metrics": ("search_metrics.json", "search"),
    "archive_validated": ("archive_validated.jsonl", "validate"),
    "validation": ("validation.json", "validate"),
    "baseline": ("baseline.jsonl", "baseline"),
    "rq1_runs": ("rq1_runs.csv", "rq1"),
    "rq1_summary": ("rq1_summary.json", "rq1"),
    "rq1_faults": ("rq1_faults.jsonl", "rq1"),
    "rq2_csv": ("rq2.csv", "rq2"),
    "rq2_summary": ("rq2_summary.json", "rq2"),
    "rq3_csv": ("rq3.csv", "rq3"),
    "rq3_summary": ("rq3_summary.json", "rq3"),
}


def artifact_path(cfg: CampaignConfig, name: str) -> Path:
    return cfg.out_dir / ARTIFACTS[name][0]


def require_artifact(cfg: CampaignConfig, name: str) -> Path:
    path = artifact_path(cfg, name)
    if not path.exists():
        stage = ARTIFACTS[name][1]
        raise StageError(f"missing artifact {path} (run '{stage}' first)")
    return path


def check_meta(meta: dict, cfg: CampaignConfig, force: bool, path):
    if force:
        return
    found = meta.get("config_hash")
    if found != cfg.hash:
        raise StageError(
            f"{path} was produced under config hash {found}, current is "
            f"{cfg.hash}; rerun upstream stages or pass --force"
        )


def _load_agent(cfg, force):
    path = require_artifact(cfg, "agent")
    net, record = load_agent(path)
    check_meta(record["meta"], cfg, force, path)
    return net


def _load_episode_artifact(cfg, name, force):
    path = require_artifact(cfg, name)
    episodes, meta = load_episodes(path)
    check_meta(meta, cfg, force, path)
    return episodes


def _load_index(cfg, force):
    path = require_artifact(cfg, "index")
    index, meta = AbstractionIndex.load(path)
    check_meta(meta, cfg, force, path)
    return index


def _load_forest(cfg, force):
    path = require_artifact(cfg, "forest")
    forest, meta = load_forest(path)
    check_meta(meta, cfg, force, path)
    return forest


def _initial_population(cfg, force):
    episodes = _load_episode_artifact(cfg, "random_episodes", force)
    size = cfg.search.population_size
    if len(episodes) < size:
        raise StageError(
            f"initial population needs {size} episodes, collect produced {len(episodes)}"
        )
    return episodes[:size]


def _search_context(cfg, force):
    net = _load_agent(cfg, force)
    index = _load_index(cfg, force)
    forest = _load_forest(cfg, force)
    env = make_env(cfg.environment)
    return SearchContext(
        net=net,
        env=env,
        forest=forest,
        index=index,
        thresholds=cfg.thresholds,
        temperature=cfg.search.temperature,
    )


def _write_json(path, payload: dict, cfg: CampaignConfig):
    write_json_artifact(path, "report", 1, payload, cfg.meta())


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Stage commands


def cmd_train_agent(cfg: CampaignConfig, args):
    train_env_config = cfg.environment
    if cfg.train_initial_ranges is not None:
        train_env_config = EnvironmentConfig(
            kind=cfg.environment.kind,
            max_steps=cfg.environment.max_steps,
            initial_ranges=cfg.train_initial_ranges,
            seed=cfg.environment.seed,
        )
    env = make_env(train_env_config)
    net, log = train_dqn(env, cfg.train)
    mean_reward = evaluate_policy(
        net, cfg.environment, cfg.eval_episodes, seed=stage_seed(cfg.seed, "eval")
    )
    save_agent(
        artifact_path(cfg, "agent"),
        net,
        cfg.environment.kind,
        cfg.train.seed,
        cfg.train.total_timesteps,
        meta=dict(cfg.meta(), eval_mean_reward=mean_reward),
    )
    save_episodes(artifact_path(cfg, "training_log"), log, cfg.meta())
    print(
        f"trained {cfg.environment.kind} agent for {cfg.train.total_timesteps} steps: "
        f"{len(log)} training episodes, greedy mean reward {mean_reward:.2f} "
        f"over {cfg.eval_episodes} episodes"
    )


def cmd_collect(cfg: CampaignConfig, args):
    net = _load_agent(cfg, args.force)
    env = make_env(cfg.environment)
    rng = np.random.default_rng(stage_seed(cfg.seed, "collect"))
    episodes = run_random_episodes(env, greedy_policy(net), cfg.dataset_random, rng)
    save_episodes(artifact_path(cfg, "random_episodes"), episodes, cfg.meta())
    faults = sum(e.fault for e in episodes)
    print(f"collected {len(episodes)} random episodes ({faults} faulty)")


def cmd_build_index(cfg: CampaignConfig, args):
    net = _load_agent(cfg, args.force)
    random_eps = _load_episode_artifact(cfg, "random_episodes", args.force)
    log = _load_episode_artifact(cfg, "training_log", args.force)
    rng = np.random.default_rng(stage_seed(cfg.seed, "build-index"))
    k = min(cfg.dataset_training, len(log))
    training_eps = sample_training_episodes(log, k, rng) if k else []
    dataset = random_eps + training_eps
    save_episodes(
        artifact_path(cfg, "ml_dataset"),
        dataset,
        dict(cfg.meta(), random=len(random_eps), training=len(training_eps)),
    )
    index = AbstractionIndex.build(collect_states(dataset), net, cfg.abstraction_level)
    index.save(artifact_path(cfg, "index"), dict(cfg.meta(), n_states=index.n_states))
    print(
        f"dataset: {len(random_eps)} random + {len(training_eps)} training episodes; "
        f"abstraction level {cfg.abstraction_level} -> {index.n_states} abstract states"
    )


def cmd_train_classifier(cfg: CampaignConfig, args):
    net = _load_agent(cfg, args.force)
    index = _load_index(cfg, args.force)
    dataset = _load_episode_artifact(cfg, "ml_dataset", args.force)
    X = encode_episodes(dataset, index, net)
    y = np.array([e.fault for e in dataset], dtype=np.int64)
    seed = stage_seed(cfg.seed, "train-classifier")
    train_idx, test_idx = split_indices(
        len(dataset), cfg.classifier_train_fraction, np.random.default_rng([seed, 0])
    )
    forest = FaultForest(n_trees=cfg.classifier_trees, random_state=[seed, 1])
    forest.fit(X[train_idx], y[train_idx])
    pred = forest.predict(X[test_idx])
    prec, rec, f1 = precision_recall_f1(y[test_idx], pred)
    metrics = {
        "accuracy": accuracy(y[test_idx], pred),
        "precision": prec,
        "recall": rec,
        "f1": f1,
        "train_rows": int(len(train_idx)),
        "test_rows": int(len(test_idx)),
        "fault_rate": float(np.mean(y)),
    }
    save_forest(artifact_path(cfg, "forest"), forest, cfg.meta())
    _write_json(artifact_path(cfg, "classifier_metrics"), metrics, cfg)
    print(
        "classifier held-out metrics: "
        + ", ".join(f"{k}={v:.3f}" for k, v in list(metrics.items())[:4])
    )


def cmd_search(cfg: CampaignConfig, args):
    ctx = _search_context(cfg, args.force)
    initial = _initial_population(cfg, args.force)
    result = run_search(initial, ctx, cfg.search)
    archive_eps = result.archive.episodes()
    satisfied = {
        e.individual.episode.episode_id: list(e.satisfied)
        for e in result.archive.entries()
    }
    save_episodes(artifact_path(cfg, "archive"), archive_eps, cfg.meta())
    payload = result.metrics()
    payload["satisfied_objectives"] = satisfied
    payload["mutant_faults"] = sum(m.episode.fault for m in result.mutants)
    _write_json(artifact_path(cfg, "search_metrics"), payload, cfg)
    print(
        f"search: {result.generations_run} generations, archive {len(archive_eps)} "
        f"episodes, {result.mutations_executed} mutations executed"
    )


def cmd_validate(cfg: CampaignConfig, args):
    """Replay never-executed archive episodes; keep executed evidence as is.

    Crossover offspring were never run, so their fault status is only a
    prediction until replayed here. Random and mutated entries were produced
    by real executions already; replaying a mutant from its recorded steps
    cannot re-apply the mid-episode perturbation, so their stored labels are
    the execution evidence.
    """
    net = _load_agent(cfg, args.force)
    archive_eps = _load_episode_artifact(cfg, "archive", args.force)
    env = make_env(cfg.environment)
    to_replay = [e for e in archive_eps if e.origin is EpisodeOrigin.CROSSOVER]
    executed = [e for e in archive_eps if e.origin is not EpisodeOrigin.CROSSOVER]
    report, outcomes = validate_episodes(to_replay, net, env)
    validated = list(executed)
    for episode, outcome in zip(to_replay, outcomes):
        if not outcome.valid:
            continue  # inconsistent with the policy: dropped from final results
        validated.append(outcome.executed if outcome.executed is not None else episode)
    save_episodes(artifact_path(cfg, "archive_validated"), validated, cfg.meta())
    payload = report.to_dict()
    payload["kept_executed"] = len(executed)
    payload["kept_executed_faults"] = sum(e.fault for e in executed)
    _write_json(artifact_path(cfg, "validation"), payload, cfg)
    frac = report.fraction_under_threshold
    print(
        f"validated archive: {len(executed)} executed entries kept, "
        f"{report.n_valid} replayed valid / {report.n_invalid} invalid, "
        f"{report.n_observed_faults} replay-observed faults; "
        + (
            f"{100.0 * frac:.1f}% of deviations under {report.distance_threshold}"
            if frac is not None
            else "no deviations"
        )
    )


def cmd_baseline(cfg: CampaignConfig, args):
    net = _load_agent(cfg, args.force)
    env = make_env(cfg.environment)
    rng = np.random.default_rng(stage_seed(cfg.seed, "baseline"))
    episodes = run_random_episodes(
        env, greedy_policy(net), cfg.baseline_episodes, rng, id_prefix="base"
    )
    save_episodes(artifact_path(cfg, "baseline"), episodes, cfg.meta())
    faults = sum(e.fault for e in episodes)
    print(f"baseline pool: {len(episodes)} episodes ({faults} faulty)")


def cmd_rq1(cfg: CampaignConfig, args):
    ctx = _search_context(cfg, args.force)
    initial = _initial_population(cfg, args.force)
    baseline = _load_episode_artifact(cfg, "baseline", args.force)
    seed = stage_seed(cfg.seed, "rq1")
    runs = run_campaigns(initial, ctx, cfg.search, cfg.runs, seed, jobs=args.jobs)
    reports = {
        scenario: rq1_report(
            runs,
            initial,
            baseline,
            scenario,
            resamples=cfg.resamples,
            rng=np.random.default_rng([seed, SCENARIOS.index(scenario)]),
        )
        for scenario in SCENARIOS
    }

    rows = []
    for scenario, report in reports.items():
        for run in runs:
            rows.append(
                {
                    "run_id": run.run_id,
                    "method": "search",
                    "scenario": scenario,
                    "budget": report.budget,
                    "faults": report.search_counts[run.run_id],
                }
            )
        for i, count in enumerate(report.baseline_counts):
            rows.append(
                {
                    "run_id": i,
                    "method": "random",
                    "scenario": scenario,
                    "budget": report.budget,
                    "faults": count,
                }
            )
    _write_csv(artifact_path(cfg, "rq1_runs"), list(rows[0]), rows)

    summary = {
        "runs": [
            {
                "run_id": r.run_id,
                "seed": r.seed,
                "mutations": r.mutations_executed,
                "validations": r.validations_executed,
                "generated_faults": r.n_generated_faults,
                "generations": r.generations_run,
                "archive_size": r.archive_size,
                "archive_faults": r.archive_faults,
            }
            for r in runs
        ],
        "scenarios": {name: report.to_dict() for name, report in reports.items()},
        "config": cfg.raw,
    }
    _write_json(artifact_path(cfg, "rq1_summary"), summary, cfg)

    faults = []
    for run in runs:
        for episode in run.fault_episodes:
            tagged = replace(episode)
            tagged.episode_id = f"run{run.run_id:03d}:{episode.episode_id}"
            faults.append(tagged)
    save_episodes(artifact_path(cfg, "rq1_faults"), faults, cfg.meta())

    for scenario, report in reports.items():
        print(
            f"rq1 {scenario}: B={report.budget}, search mean {report.search_mean:.1f} "
            f"vs random mean {report.baseline_mean:.1f}, one-sided p={report.p_one_sided:.2e}"
        )


def cmd_rq2(cfg: CampaignConfig, args):
    net = _load_agent(cfg, args.force)
    dataset = _load_episode_artifact(cfg, "ml_dataset", args.force)
    rows = run_rq2_sweep(
        dataset,
        net,
        cfg.rq2_levels,
        n_trees=cfg.rq2_trees,
        train_fraction=cfg.classifier_train_fraction,
        seed=stage_seed(cfg.seed, "rq2"),
    )
    _write_csv(
        artifact_path(cfg, "rq2_csv"),
        ["level", "n_abstract_states", "accuracy", "precision", "recall"],
        [r.to_dict() for r in rows],
    )
    best = max(rows, key=lambda r: r.accuracy)
    _write_json(
        artifact_path(cfg, "rq2_summary"),
        {
            "rows": [r.to_dict() for r in rows],
            "best_level": best.level,
            "best_accuracy": best.accuracy,
        },
        cfg,
    )
    for row in rows:
        print(
            f"rq2 d={row.level:g}: {row.n_abstract_states} abstract states, "
            f"accuracy {row.accuracy:.3f}"
        )


def cmd_rq3(cfg: CampaignConfig, args):
    net = _load_agent(cfg, args.force)
    baseline = _load_episode_artifact(cfg, "baseline", args.force)
    fault_eps = _load_episode_artifact(cfg, "rq1_faults", args.force)
    if cfg.rq3_level is None:
        index = _load_index(cfg, args.force)
    else:
        # Rule features at their own granularity, rebuilt over the same
        # concrete states that back the campaign index.
        dataset = _load_episode_artifact(cfg, "ml_dataset", args.force)
        index = AbstractionIndex.build(collect_states(dataset), net, cfg.rq3_level)

    from .experiments import CampaignRun

    by_run: dict[int, list] = {}
    for episode in fault_eps:
        run_tag, _, rest = episode.episode_id.partition(":")
        run_id = int(run_tag.removeprefix("run"))
        episode.episode_id = rest
        by_run.setdefault(run_id, []).append(episode)
    campaign_runs = [
        CampaignRun(
            run_id=run_id,
            seed=0,
            mutations_executed=0,
            validations_executed=0,
            n_generated_faults=len(eps),
            generations_run=0,
            archive_size=0,
            archive_faults=0,
            all_satisfied=False,
            fault_episodes=eps,
        )
        for run_id, eps in sorted(by_run.items())
    ]
    try:
        report = run_rq3(
            campaign_runs,
            baseline,
            index,
            net,
            k=cfg.kfold,
            seed=stage_seed(cfg.seed, "rq3"),
        )
    except ValueError as exc:
        raise StageError(f"rq3: {exc}") from exc
    rows = [
        {
            "dataset": "campaign" if r.run_id is None else f"run{r.run_id}",
            "n_faults": r.n_faults,
            "median_precision": r.medians["precision"],
            "median_recall": r.medians["recall"],
            "median_f1": r.medians["f1"],
            "n_rules": r.n_rules,
            "rules_match_tree": r.rules_match_tree,
        }
        for r in [report.campaign] + report.per_run
    ]
    _write_csv(artifact_path(cfg, "rq3_csv"), list(rows[0]), rows)
    _write_json(artifact_path(cfg, "rq3_summary"), report.to_dict(), cfg)
    c = report.campaign
    print(
        f"rq3 campaign dataset: {c.n_faults} faults, median F1 {c.medians['f1']:.3f}, "
        f"{c.n_rules} fault rules (tree agreement: {c.rules_match_tree})"
    )
    for r in report.per_run:
        print(
            f"rq3 run {r.run_id}: {r.n_faults} faults, median F1 {r.medians['f1']:.3f}"
        )


COMMANDS = {
    "train-agent": cmd_train_agent,
    "collect": cmd_collect,
    "build-index": cmd_build_index,
    "train-classifier": cmd_train_classifier,
    "search": cmd_search,
    "validate": cmd_validate,
    "baseline": cmd_baseline,
    "rq1": cmd_rq1,
    "rq2": cmd_rq2,
    "rq3": cmd_rq3,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlfault",
        description="Search-based functional-fault testing for RL policies",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="campaign config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument(
            "--force",
            action="store_true",
            help="accept input artifacts with a mismatched config hash",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_campaign_config(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except (StageError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
