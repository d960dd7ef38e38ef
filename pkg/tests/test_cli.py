import json

import numpy as np
import pytest

from gags.cli import build_parser, main, resolve_config
from gags.config import save_json, to_dict
from gags.tensorio import file_sha256, read_pgm, write_pgm16


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("CONFIG", "OUTPUT_DIR", "SEED", "THREADS", "ITERATIONS", "DISTILL_MODE", "GAS_ON",
                 "FEATURE_DIM", "LAMBDA_ENTROPY", "LAMBDA_CONS", "VERBOSE"):
        monkeypatch.delenv(f"GAGS_{name}", raising=False)


@pytest.fixture
def tiny_config(tmp_path, tiny_scene):
    path = tmp_path / "run.json"
    save_json({
        "seed": 0,
        "scene": to_dict(tiny_scene),
        "prompt": {"patch_size": 16},
        "train": {"iterations": 5, "hidden_dim": 8},
        "query": {"kernel": 3},
    }, path)
    return path


def test_flags_override_env_override_json(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    save_json({"seed": 1, "threads": 2, "train": {"iterations": 10, "lambda_cons": 0.3}}, path)
    monkeypatch.setenv("GAGS_SEED", "2")
    monkeypatch.setenv("GAGS_ITERATIONS", "20")
    monkeypatch.setenv("GAGS_GAS_ON", "false")
    args = build_parser().parse_args(["distill", "-c", str(path), "--seed", "3"])
    run = resolve_config(args)
    assert run.seed == 3
    assert run.threads == 2
    assert run.train.iterations == 20
    assert run.train.lambda_cons == 0.3
    assert run.train.gas_on is False
    args = build_parser().parse_args(["distill", "-c", str(path), "--gas-on"])
    assert resolve_config(args).train.gas_on is True


def test_unknown_config_key_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    save_json({"seed": 0, "train": {"iterations": 1, "learning_rate": 0.1}}, path)
    assert main(["gen-scene", "-c", str(path), "-o", str(tmp_path / "run")]) == 2


def test_missing_seed_exits_2(tmp_path):
    assert main(["gen-scene", "-o", str(tmp_path / "run")]) == 2


def test_bad_env_value_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("GAGS_SEED", "zero")
    assert main(["gen-scene", "-o", str(tmp_path / "run")]) == 2


def test_missing_inputs_exit_3(tmp_path):
    assert main(["distill", "--seed", "0", "-o", str(tmp_path / "empty")]) == 3
    assert main(["eval", "-o", str(tmp_path / "empty")]) == 3


def test_eval_on_identical_masks_scores_one(tmp_path):
    run = tmp_path / "run"
    mask = np.zeros((6, 6), dtype=np.uint16)
    mask[1:4, 2:5] = 1
    write_pgm16(run / "query" / "view_000_cup_mask.pgm", mask)
    write_pgm16(run / "gt" / "view_000_cup_gt.pgm", mask)
    save_json([{"label": "cup", "view": 0, "localization": [3, 2], "peak": 0.9,
                "mask": "view_000_cup_mask.pgm"}], run / "query" / "results.json")
    save_json([{"query": "cup", "view": 0, "box": [2, 1, 4, 3], "mask": "view_000_cup_gt.pgm"}],
              run / "gt" / "gt.json")
    assert main(["eval", "-o", str(run)]) == 0
    metrics = json.loads((run / "eval" / "metrics.json").read_text())
    assert metrics["mIoU"] == 1.0
    assert metrics["mAcc"] == 1.0
    assert (run / "eval" / "summary.xlsx").exists()
    assert (run / "manifest_eval.json").exists()


def test_pipeline_is_deterministic(tmp_path, tiny_config):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", "-c", str(tiny_config), "-o", str(first)]) == 0
    assert main(["pipeline", "-c", str(tiny_config), "-o", str(second)]) == 0
    metrics = (first / "eval" / "metrics.json").read_bytes()
    assert metrics == (second / "eval" / "metrics.json").read_bytes()
    assert json.loads(metrics)["queries"] >= 1

    manifest = json.loads((first / "manifest_distill.json").read_text())
    assert "distill/field.ply" in manifest["outputs"]
    assert manifest["config"]["train"]["iterations"] == 5
    assert "timestamp" not in json.dumps(manifest)
    log = (first / "distill" / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 5


def test_zero_iteration_distill_keeps_the_field(tmp_path, tiny_config):
    run = tmp_path / "run"
    for command in ("gen-scene", "prompt", "segment"):
        assert main([command, "-c", str(tiny_config), "-o", str(run)]) == 0
    assert main(["distill", "-c", str(tiny_config), "-o", str(run), "--iterations", "0"]) == 0
    assert file_sha256(run / "prompts" / "field.ply") == file_sha256(run / "distill" / "field.ply")


def test_segment_ingests_exported_masks(tmp_path, tiny_config):
    source = tmp_path / "source"
    for command in ("gen-scene", "prompt", "segment"):
        assert main([command, "-c", str(tiny_config), "-o", str(source)]) == 0
    config = tmp_path / "ingest.json"
    save_json({
        "seed": 0,
        "cameras_path": str(source / "scene" / "cameras.json"),
        "ingest": {"masks_dir": str(source / "segment")},
    }, config)
    target = tmp_path / "target"
    assert main(["segment", "-c", str(config), "-o", str(target)]) == 0
    for name in ("s", "p", "w"):
        np.testing.assert_array_equal(read_pgm(target / "segment" / f"view_001_mask_{name}.pgm"),
                                      read_pgm(source / "segment" / f"view_001_mask_{name}.pgm"))


def test_render_writes_previews(tmp_path, tiny_config):
    run = tmp_path / "run"
    assert main(["gen-scene", "-c", str(tiny_config), "-o", str(run)]) == 0
    assert main(["render", "-c", str(tiny_config), "-o", str(run)]) == 0
    assert (run / "renders" / "view_000_features.tensor").exists()
    assert (run / "renders" / "view_001_color.png").exists()
    assert (run / "manifest_render.json").exists()
