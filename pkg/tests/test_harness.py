import json

import numpy as np
import pytest

from featrank.harness import (
    ConfigError,
    ExperimentConfig,
    ablation_constraints,
    ablation_step_counter,
    build_network_spec,
    derive_seed,
    export_mask,
    feature_similarity,
    render_markdown,
    resolve_config,
    run_experiment,
    write_report,
)


@pytest.mark.parametrize(
    "d,c,expected",
    [
        (784, 10, (784, 392, 196, 10)),
        (78, 10, (78, 39, 19, 10)),
        (61, 26, (61, 30, 15, 26)),
        (56, 6, (56, 28, 14, 6)),
        (561, 6, (561, 280, 140, 6)),
        (617, 26, (617, 308, 154, 26)),
    ],
)
def test_build_network_spec(d, c, expected):
    assert build_network_spec(d, c).layer_sizes == expected


@pytest.mark.parametrize("d", range(4, 300, 7))
def test_network_spec_halving(d):
    sizes = build_network_spec(d, 2).layer_sizes
    assert sizes[1] == sizes[0] // 2 and sizes[2] == sizes[0] // 4


def test_build_network_spec_errors():
    with pytest.raises(ValueError):
        build_network_spec(3, 2)
    with pytest.raises(ValueError):
        build_network_spec(5, 10)


def test_similarity():
    assert feature_similarity([1, 2, 3], [3, 2, 1]) == 1.0
    assert feature_similarity([1, 2], [3, 4]) == 0.0
    assert feature_similarity([1, 2, 3, 4], [4, 5, 6, 1]) == 0.5
    with pytest.raises(ValueError):
        feature_similarity([1, 2], [1])


def _read_pgm(path):
    """Minimal independent P5 reader: header tokens, then raw bytes."""
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode())
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = list(raw[pos + 1:])
    return magic, w, h, maxval, pixels


def test_mask_all_selected(tmp_path):
    magic, w, h, maxval, px = _read_pgm(export_mask(range(784), (28, 28), tmp_path / "m.pgm"))
    assert (magic, w, h, maxval) == ("P5", 28, 28, 255)
    assert px == [255] * 784


def test_mask_empty(tmp_path):
    *_, px = _read_pgm(export_mask([], (28, 28), tmp_path / "m.pgm"))
    assert px == [0] * 784


def test_mask_round_trip(tmp_path):
    chosen = set(np.random.default_rng(0).choice(784, 78, replace=False).tolist())
    *_, px = _read_pgm(export_mask(chosen, (28, 28), tmp_path / "m.pgm"))
    assert {i for i, v in enumerate(px) if v == 255} == chosen
    assert set(px) == {0, 255}


def test_mask_rejects_off_grid(tmp_path):
    with pytest.raises(ValueError):
        export_mask([800], (28, 28), tmp_path / "m.pgm")


def test_resolve_precedence():
    cfg = resolve_config({"preset": "desk", "train.patience": 7}, {"seed": 9})
    assert cfg["train.max_epochs"] == 500
    assert cfg["train.patience"] == 7
    assert cfg["seed"] == 9
    assert resolve_config({})["train.max_epochs"] == 20000
    with pytest.raises(ConfigError):
        resolve_config({"train.epochs": 3})


def test_derive_seed_is_stable_and_keyed():
    assert derive_seed(1, "swpa", "top") == derive_seed(1, "swpa", "top")
    assert derive_seed(1, "swpa", "top") != derive_seed(1, "swpa", "bottom")
    assert derive_seed(1, "a") != derive_seed(2, "a")


def test_rejects_fraction_selecting_nothing(synthetic_flat):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_flat({**synthetic_flat, "fraction": 0.0})
    cfg = ExperimentConfig.from_flat({**synthetic_flat, "fraction": 0.05, "swpa.f": 0.25})
    with pytest.raises(ConfigError):
        run_experiment(cfg)


def test_rejects_unknown_method(synthetic_flat):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_flat({**synthetic_flat, "methods": ["lasso"]})


@pytest.fixture(scope="module")
def synthetic_report():
    from conftest import SYNTHETIC

    return run_experiment(ExperimentConfig.from_flat(SYNTHETIC))


def test_experiment_slices(synthetic_report):
    data = synthetic_report.data
    assert data["selected_count"] == 4
    for method in ("swpa", "sbs", "pfi"):
        entry = data["methods"][method]
        top, bottom = entry["top"]["features"], entry["bottom"]["features"]
        assert len(top) == len(bottom) == 4
        assert not set(top) & set(bottom)
        assert entry["top"]["layer_sizes"] == [4, 2, 1, 2]
        assert 0.0 <= entry["top"]["test_accuracy"] <= 1.0
    runs = data["methods"]["random"]["runs"]
    accs = [r["test_accuracy"] for r in runs]
    assert len(runs) == 3
    assert data["methods"]["random"]["worst"] == min(accs)
    assert data["methods"]["random"]["average"] == pytest.approx(np.mean(accs))
    assert not synthetic_report.diverged


def test_experiment_is_byte_identical(synthetic_report):
    from conftest import SYNTHETIC

    again = run_experiment(ExperimentConfig.from_flat(SYNTHETIC))
    assert again.to_json() == synthetic_report.to_json()


def test_write_report(tmp_path, synthetic_report):
    paths = write_report(synthetic_report, tmp_path, grid=(4, 4))
    assert json.loads(paths["json"].read_text()) == json.loads(synthetic_report.to_json())
    md = paths["markdown"].read_text()
    assert "| swpa | 4 |" in md and "random average" in md
    assert "retrain" in json.loads(paths["timings"].read_text())
    assert paths["mask_swpa_top"].read_bytes().startswith(b"P5\n4 4\n255\n")


def test_divergence_is_recorded_per_cell(synthetic_flat, monkeypatch):
    import featrank.harness as harness
    from featrank.nn import TrainingDivergedError

    real_train = harness.train
    calls = []

    def flaky_train(net, data, cfg):
        calls.append(1)
        if len(calls) == 2:
            raise TrainingDivergedError(3, float("nan"))
        return real_train(net, data, cfg)

    monkeypatch.setattr(harness, "train", flaky_train)
    monkeypatch.setenv("FEATRANK_THREADS", "1")
    cfg = ExperimentConfig.from_flat({**synthetic_flat, "methods": ["random"]})
    report = run_experiment(cfg)
    runs = report.data["methods"]["random"]["runs"]
    assert report.diverged
    assert "epoch 3" in runs[1]["error"]
    assert "test_accuracy" in runs[0] and "test_accuracy" in runs[2]
    assert report.data["methods"]["random"]["worst"] == min(runs[0]["test_accuracy"], runs[2]["test_accuracy"])


def test_step_counter_identical_settings_overlap_fully(synthetic_flat):
    cfg = ExperimentConfig.from_flat(synthetic_flat)
    report = ablation_step_counter(cfg, steps=(1, 1))
    assert report.data["similarity"] == 1.0


def test_step_counter_recovers_signal(synthetic_flat):
    cfg = ExperimentConfig.from_flat(synthetic_flat)
    report = ablation_step_counter(cfg, steps=(1, 4))
    informative = set(synthetic_flat["dataset.synthetic.informative"])
    for entry in report.data["variants"].values():
        assert set(entry["top"]["features"]) == informative
    assert report.data["similarity"] >= 0.5
    assert "selection overlap" in render_markdown(report.data)


def test_constraints_matrix(synthetic_flat):
    report = ablation_constraints(ExperimentConfig.from_flat(synthetic_flat))
    m = np.array(report.data["similarity"])
    assert m.shape == (4, 4)
    np.testing.assert_array_equal(np.diag(m), 1.0)
    np.testing.assert_array_equal(m, m.T)
    assert report.data["order"] == ["base", "l1", "wvl", "l1+wvl"]
    assert report.data["variants"]["l1"]["ranking"]["params"]["penalty"]["enable_l1"] is True
