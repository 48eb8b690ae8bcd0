import json
from pathlib import Path

import pytest

from stfoundry import cli


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full gen-data -> pretrain -> tune -> eval pipeline on a tiny world."""
    root = tmp_path_factory.mktemp("pipeline")
    world_cfg = root / "world.json"
    world_cfg.write_text(json.dumps({
        "num_segments": 10, "num_trajectories": 30, "num_users": 3, "seed": 7,
    }))
    world_dir = root / "world"
    assert cli.main([
        "gen-data", "--config", str(world_cfg), "--out", str(world_dir),
    ]) == cli.EXIT_OK

    train_cfg = root / "train.json"
    train_cfg.write_text(json.dumps({
        "world_dir": str(world_dir), "epochs": 1, "batch_size": 8,
        "series_length": 12, "series_per_segment": 1, "seed": 0,
    }))
    pre_dir = root / "pre"
    assert cli.main([
        "pretrain", "--config", str(train_cfg), "--out", str(pre_dir), "--serial",
    ]) == cli.EXIT_OK

    tune_cfg = root / "tune.json"
    tune_cfg.write_text(json.dumps({
        "world_dir": str(world_dir), "checkpoint": str(pre_dir / "stage1.pt"),
        "epochs": 1, "batch_size": 8, "series_length": 12,
        "series_per_segment": 1, "seed": 0,
    }))
    tune_dir = root / "tune"
    assert cli.main([
        "tune", "--config", str(tune_cfg), "--out", str(tune_dir), "--serial",
    ]) == cli.EXIT_OK

    eval_cfg = root / "eval.json"
    eval_cfg.write_text(json.dumps({
        "world_dir": str(world_dir), "checkpoint": str(tune_dir / "stage2.pt"),
    }))
    eval_dir = root / "eval"
    assert cli.main([
        "eval", "--config", str(eval_cfg), "--out", str(eval_dir), "--serial",
    ]) == cli.EXIT_OK
    return root


def test_gen_data_outputs(pipeline):
    world_dir = pipeline / "world"
    for name in ("network.csv", "trajectories.jsonl", "traffic_state.csv",
                 "world_config.json", "run_manifest.json"):
        assert (world_dir / name).is_file(), name


def test_manifest_contents(pipeline):
    manifest = json.loads((pipeline / "pre" / "run_manifest.json").read_text())
    assert manifest["command"] == "pretrain"
    assert len(manifest["config_sha256"]) == 64
    assert manifest["wall_clock_s"] > 0
    assert "checkpoint" in manifest["artifacts"]


def test_pretrain_artifacts(pipeline):
    assert (pipeline / "pre" / "stage1.pt").is_file()
    trace = (pipeline / "pre" / "mrt_trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,task,component,value"
    assert len(trace) > 1


def test_eval_reports(pipeline):
    reports = sorted(p.name for p in (pipeline / "eval" / "reports").glob("*.json"))
    assert reports == sorted([
        "next_hop.json", "classification.json", "tte.json", "one_step.json",
        "multi_step.json", "imputation.json", "recovery.json",
        "similar_search.json",
    ])
    payload = json.loads((pipeline / "eval" / "reports" / "tte.json").read_text())
    assert payload["task_id"] == "tte"
    assert payload["metrics"]


def test_report_command(pipeline, capsys):
    assert cli.main(["report", "--out", str(pipeline / "eval")]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "tte" in out and "MAE" in out


def test_single_task_eval(pipeline, tmp_path):
    eval_cfg = tmp_path / "eval.json"
    eval_cfg.write_text(json.dumps({
        "world_dir": str(pipeline / "world"),
        "checkpoint": str(pipeline / "tune" / "stage2.pt"),
    }))
    out = tmp_path / "out"
    assert cli.main([
        "eval", "--config", str(eval_cfg), "--out", str(out),
        "--task", "next_hop", "--serial",
    ]) == cli.EXIT_OK
    assert [p.name for p in (out / "reports").glob("*.json")] == ["next_hop.json"]


def test_recovery_mask_ratio_flag(pipeline, tmp_path):
    eval_cfg = tmp_path / "eval.json"
    eval_cfg.write_text(json.dumps({
        "world_dir": str(pipeline / "world"),
        "checkpoint": str(pipeline / "tune" / "stage2.pt"),
    }))
    out = tmp_path / "out"
    assert cli.main([
        "eval", "--config", str(eval_cfg), "--out", str(out),
        "--task", "recovery", "--mask-ratio", "0.85", "--serial",
    ]) == cli.EXIT_OK
    payload = json.loads((out / "reports" / "recovery.json").read_text())
    assert payload["notes"]["mask_ratio"] == 0.85


def test_nonempty_out_refused(pipeline, tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    code = cli.main(["gen-data", "--out", str(out), "--seed", "1"])
    assert code == cli.EXIT_USAGE
    # --force allows it
    code = cli.main(["gen-data", "--out", str(out), "--seed", "1", "--force"])
    assert code == cli.EXIT_OK


def test_missing_config_file(tmp_path):
    code = cli.main([
        "pretrain", "--config", str(tmp_path / "nope.json"),
        "--out", str(tmp_path / "o"),
    ])
    assert code == cli.EXIT_DEPENDENCY


def test_config_required(tmp_path):
    assert cli.main(["pretrain", "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE


def test_missing_checkpoint(pipeline, tmp_path):
    tune_cfg = tmp_path / "tune.json"
    tune_cfg.write_text(json.dumps({
        "world_dir": str(pipeline / "world"),
        "checkpoint": str(tmp_path / "missing.pt"),
        "epochs": 1,
    }))
    code = cli.main(["tune", "--config", str(tune_cfg), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_DEPENDENCY


def test_bad_usage_exit_code():
    assert cli.main(["not-a-command"]) == cli.EXIT_USAGE
    assert cli.main([]) == cli.EXIT_USAGE


def test_tune_single_task_ablation(pipeline, tmp_path):
    tune_cfg = tmp_path / "tune.json"
    tune_cfg.write_text(json.dumps({
        "world_dir": str(pipeline / "world"),
        "checkpoint": str(pipeline / "pre" / "stage1.pt"),
        "epochs": 1, "batch_size": 8, "series_length": 12,
        "series_per_segment": 1, "seed": 0,
    }))
    out = tmp_path / "o"
    assert cli.main([
        "tune", "--config", str(tune_cfg), "--out", str(out),
        "--task", "tte", "--serial",
    ]) == cli.EXIT_OK
    trace = (out / "tune_trace.csv").read_text()
    assert "tte" in trace and "next_hop" not in trace
