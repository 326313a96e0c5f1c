import json

import numpy as np
import pytest

from rlfault.cli import main

TINY_CONFIG = {
    "seed": 5,
    "out_dir": "",  # filled per test
    # Wide starting box so even a barely trained agent produces a mix of
    # boundary faults and pole falls, exercising every pipeline stage.
    "environment": {
        "kind": "cartpole",
        "max_steps": 120,
        "initial_ranges": [[-2.38, 2.38], [-2.0, 2.0], [-0.05, 0.05], [-0.5, 0.5]],
    },
    "agent": {
        "total_timesteps": 1200,
        "hidden_sizes": [16, 16],
        "learning_rate": 0.01,
        "learn_start": 200,
        "train_every": 4,
        "eval_episodes": 5,
        "seed": 3,
    },
    "abstraction": {"level": 2.0},
    "dataset": {"random_episodes": 40, "training_episodes": 10},
    "classifier": {"n_trees": 10, "train_fraction": 0.7},
    "search": {
        "population_size": 25,
        "generations": 6,
        "crossover_rate": 0.75,
        "match_retries": 20,
    },
    "thresholds": {"reward_max": 30, "fault_prob_min": 0.9, "certainty_max": 0.04},
    "experiments": {
        "runs": 3,
        "resamples": 25,
        "baseline_episodes": 200,
        "rq2_levels": [0.5, 2.0, 50.0],
        "rq2_trees": 5,
        "kfold": 2,
    },
}

PIPELINE = [
    "train-agent",
    "collect",
    "build-index",
    "train-classifier",
    "baseline",
    "search",
    "validate",
    "rq1",
    "rq2",
    "rq3",
]


def write_config(tmp_path, overrides=None, name="campaign.json"):
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg["out_dir"] = str(tmp_path / "out")
    for key, value in (overrides or {}).items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def completed_pipeline(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipeline")
    config = write_config(tmp_path)
    for stage in PIPELINE:
        assert main([stage, "--config", str(config)]) == 0, f"stage {stage} failed"
    return tmp_path, config


class TestFullPipeline:
    def test_all_artifacts_exist(self, completed_pipeline):
        tmp_path, _ = completed_pipeline
        out = tmp_path / "out"
        expected = [
            "agent.json",
            "training_log.jsonl",
            "random_episodes.jsonl",
            "ml_dataset.jsonl",
            "index.json",
            "forest.json",
            "classifier_metrics.json",
            "archive.jsonl",
            "search_metrics.json",
            "archive_validated.jsonl",
            "validation.json",
            "baseline.jsonl",
            "rq1_runs.csv",
            "rq1_summary.json",
            "rq1_faults.jsonl",
            "rq2.csv",
            "rq2_summary.json",
            "rq3.csv",
            "rq3_summary.json",
        ]
        for name in expected:
            assert (out / name).exists(), name

    def test_artifacts_embed_config_hash(self, completed_pipeline):
        tmp_path, config = completed_pipeline
        from rlfault.config import load_campaign_config

        cfg = load_campaign_config(config)
        record = json.loads((tmp_path / "out" / "index.json").read_text())
        assert record["meta"]["config_hash"] == cfg.hash
        header = (tmp_path / "out" / "random_episodes.jsonl").read_text().splitlines()[0]
        assert json.loads(header)["meta"]["config_hash"] == cfg.hash

    def test_rerun_stage_is_bitwise_identical(self, completed_pipeline):
        tmp_path, config = completed_pipeline
        out = tmp_path / "out"
        before = {
            name: (out / name).read_bytes()
            for name in ("random_episodes.jsonl", "archive.jsonl", "rq2.csv")
        }
        assert main(["collect", "--config", str(config)]) == 0
        assert main(["search", "--config", str(config)]) == 0
        assert main(["rq2", "--config", str(config)]) == 0
        for name, blob in before.items():
            assert (out / name).read_bytes() == blob, name

    def test_rq1_csv_shape(self, completed_pipeline):
        tmp_path, _ = completed_pipeline
        lines = (tmp_path / "out" / "rq1_runs.csv").read_text().splitlines()
        assert lines[0] == "run_id,method,scenario,budget,faults"
        # 2 scenarios x (3 search runs + 25 resamples)
        assert len(lines) - 1 == 2 * (3 + 25)

    def test_parallel_rq1_matches_sequential(self, completed_pipeline):
        """--jobs fans campaign runs out to processes; results are merged by
        run index, so the artifacts must be bitwise identical."""
        tmp_path, config = completed_pipeline
        out = tmp_path / "out"
        sequential = {
            name: (out / name).read_bytes()
            for name in ("rq1_runs.csv", "rq1_summary.json", "rq1_faults.jsonl")
        }
        assert main(["rq1", "--config", str(config), "--jobs", "2"]) == 0
        for name, blob in sequential.items():
            assert (out / name).read_bytes() == blob, name


class TestPrerequisites:
    def test_search_before_classifier_names_stage(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["train-agent", "--config", str(config)]) == 0
        assert main(["collect", "--config", str(config)]) == 0
        assert main(["build-index", "--config", str(config)]) == 0
        code = main(["search", "--config", str(config)])
        captured = capsys.readouterr()
        assert code == 1
        assert "train-classifier" in captured.err

    def test_first_stage_missing_agent(self, tmp_path, capsys):
        config = write_config(tmp_path)
        code = main(["collect", "--config", str(config)])
        assert code == 1
        assert "train-agent" in capsys.readouterr().err


class TestConfigErrors:
    def test_missing_file(self, tmp_path, capsys):
        code = main(["collect", "--config", str(tmp_path / "nope.json")])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["collect", "--config", str(path)]) == 2
        assert "invalid JSON" in capsys.readouterr().err

    def test_missing_field_names_path_and_field(self, tmp_path, capsys):
        config = write_config(tmp_path)
        raw = json.loads(config.read_text())
        del raw["thresholds"]["reward_max"]
        config.write_text(json.dumps(raw))
        assert main(["collect", "--config", str(config)]) == 2
        err = capsys.readouterr().err
        assert "thresholds.reward_max" in err
        assert str(config) in err

    def test_wrong_type_reported(self, tmp_path, capsys):
        config = write_config(tmp_path, {"abstraction.level": "one"})
        assert main(["collect", "--config", str(config)]) == 2
        assert "abstraction.level" in capsys.readouterr().err


class TestSeedAndForce:
    def test_seed_override_invalidates_artifacts(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["train-agent", "--config", str(config)]) == 0
        code = main(["collect", "--config", str(config), "--seed", "99"])
        assert code == 1
        assert "config hash" in capsys.readouterr().err

    def test_force_accepts_mismatched_inputs(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["train-agent", "--config", str(config)]) == 0
        assert main(["collect", "--config", str(config), "--seed", "99", "--force"]) == 0

    def test_out_override(self, tmp_path):
        config = write_config(tmp_path)
        alt = tmp_path / "elsewhere"
        assert main(["train-agent", "--config", str(config), "--out", str(alt)]) == 0
        assert (alt / "agent.json").exists()


class TestPresets:
    def test_bundled_presets_parse(self):
        from rlfault.config import load_campaign_config, preset_path

        for name in ("cartpole", "mountain_car"):
            cfg = load_campaign_config(preset_path(name))
            assert cfg.search.crossover_rate == 0.75
            assert cfg.thresholds.fault_prob_min == 0.95
            assert cfg.thresholds.certainty_max == 0.04

    def test_preset_parameters_match_report(self):
        from rlfault.config import load_campaign_config, preset_path

        cartpole = load_campaign_config(preset_path("cartpole"))
        assert cartpole.train.total_timesteps == 50_000
        assert cartpole.abstraction_level == 1.0
        assert cartpole.thresholds.reward_max == 70
        mc = load_campaign_config(preset_path("mountain_car"))
        assert mc.train.total_timesteps == 90_000
        assert mc.abstraction_level == 500.0
        assert mc.thresholds.reward_max == -180
