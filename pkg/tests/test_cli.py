import json

import numpy as np
import pytest

from featrank.cli import main
from featrank.harness import ExperimentConfig, rank_features


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_rank_writes_ranking(tmp_path, synthetic_config_file, capsys):
    code, _, _ = _run(["rank", "--method", "sbs", "--config", synthetic_config_file, "--out", tmp_path], capsys)
    assert code == 0
    obj = json.loads((tmp_path / "ranking_sbs.json").read_text())
    assert obj["method"] == "sbs"
    assert len(obj["scores"]) == len(obj["ordering"]) == 16
    assert obj["config"]["seed"] == 3


def test_cli_matches_library(tmp_path, synthetic_config_file, synthetic_flat, capsys):
    code, _, _ = _run(["rank", "--method", "pfi", "--config", synthetic_config_file, "--out", tmp_path,
                       "--seed", 11, "--pfi.c=2"], capsys)
    assert code == 0
    from_cli = json.loads((tmp_path / "ranking_pfi.json").read_text())
    ranking, _ = rank_features(ExperimentConfig.from_flat({**synthetic_flat, "seed": 11, "pfi.c": 2}), "pfi")
    assert from_cli["scores"] == ranking.scores.tolist()
    assert from_cli["config"]["pfi.c"] == 2


def test_experiment_rerun_identical(tmp_path, synthetic_config_file, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        code, _, _ = _run(["experiment", "--config", synthetic_config_file, "--seed", 7, "--out", out], capsys)
        assert code == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "report.md").read_bytes() == (b / "report.md").read_bytes()


def test_experiment_writes_masks(tmp_path, synthetic_config_file, capsys):
    code, out, _ = _run(["experiment", "--config", synthetic_config_file, "--out", tmp_path,
                         "--methods=[\"swpa\"]", "--dataset.grid=\"4x4\""], capsys)
    assert code == 0
    assert (tmp_path / "mask_swpa_top.pgm").exists()
    assert "| swpa |" in out


def test_bad_flag_exits_1_with_usage(tmp_path, synthetic_config_file, capsys):
    code, _, err = _run(["experiment", "--config", synthetic_config_file, "--bogus"], capsys)
    assert code == 1
    assert "usage:" in err


def test_unknown_override_key(synthetic_config_file, capsys):
    code, _, err = _run(["experiment", "--config", synthetic_config_file, "--train.epochs=5"], capsys)
    assert code == 1
    assert "--train.epochs" in err


def test_unknown_subcommand(capsys):
    code, _, err = _run(["frobnicate"], capsys)
    assert code == 1
    assert "usage:" in err


def test_missing_dataset_names_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset.kind": "idx", "dataset.images": str(tmp_path / "nope-images"),
                               "dataset.labels": str(tmp_path / "nope-labels")}))
    code, _, err = _run(["train", "--config", cfg, "--out", tmp_path], capsys)
    assert code == 1
    assert "nope-images" in err


def test_missing_config_file(tmp_path, capsys):
    code, _, err = _run(["train", "--config", tmp_path / "absent.json"], capsys)
    assert code == 1
    assert "absent.json" in err


def test_train_command(tmp_path, synthetic_config_file, capsys):
    code, out, _ = _run(["train", "--config", synthetic_config_file, "--out", tmp_path], capsys)
    assert code == 0
    obj = json.loads((tmp_path / "train.json").read_text())
    assert obj["layer_sizes"] == [16, 8, 4, 2]
    assert 0 <= obj["test_accuracy"] <= 1
    assert "test accuracy" in out


def test_ablate_commands(tmp_path, synthetic_config_file, capsys):
    code, _, _ = _run(["ablate", "--kind", "step-counter", "--config", synthetic_config_file, "--out", tmp_path], capsys)
    assert code == 0
    assert json.loads((tmp_path / "ablation_step_counter.json").read_text())["steps"] == [1, 4]
    code, _, _ = _run(["ablate", "--kind", "constraints", "--config", synthetic_config_file, "--out", tmp_path], capsys)
    assert code == 0
    m = json.loads((tmp_path / "ablation_constraints.json").read_text())["similarity"]
    assert [m[i][i] for i in range(4)] == [1.0] * 4


def test_similarity_and_mask_commands(tmp_path, synthetic_config_file, capsys):
    for method in ("swpa", "random"):
        _run(["rank", "--method", method, "--config", synthetic_config_file, "--out", tmp_path], capsys)
    a, b = tmp_path / "ranking_swpa.json", tmp_path / "ranking_random.json"
    code, out, _ = _run(["similarity", a, a, "--fraction", 0.25], capsys)
    assert code == 0 and out.strip() == "1.0000"
    code, _, _ = _run(["similarity", a, b, "--fraction", 0.25, "--out", tmp_path / "sim.json"], capsys)
    assert code == 0
    assert json.loads((tmp_path / "sim.json").read_text())["selected"] == 4
    code, _, _ = _run(["export-mask", "--ranking", a, "--grid", "4x4", "--fraction", 0.25,
                       "--out", tmp_path / "m.pgm"], capsys)
    assert code == 0
    pixels = np.frombuffer((tmp_path / "m.pgm").read_bytes()[-16:], dtype=np.uint8)
    assert (pixels == 255).sum() == 4
    code, _, err = _run(["export-mask", "--ranking", a, "--grid", "28x28", "--out", tmp_path / "x.pgm"], capsys)
    assert code == 1 and "does not cover" in err


def test_divergence_exit_code(tmp_path, synthetic_config_file, capsys, monkeypatch):
    import featrank.harness as harness
    import featrank.selectors as selectors
    from featrank.nn import TrainingDivergedError

    def boom(*args, **kwargs):
        raise TrainingDivergedError(1, float("inf"))

    monkeypatch.setattr(harness, "train", boom)
    monkeypatch.setattr(selectors, "train", boom)
    code, _, _ = _run(["experiment", "--config", synthetic_config_file, "--out", tmp_path,
                       "--methods=[\"random\"]"], capsys)
    assert code == 2
    code, _, err = _run(["train", "--config", synthetic_config_file, "--out", tmp_path], capsys)
    assert code == 2 and "diverged" in err
