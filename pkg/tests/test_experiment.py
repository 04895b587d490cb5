import csv
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from d2lmat import presets
from d2lmat.cli import main
from d2lmat.data import load_matrix, save_matrix
from d2lmat.errors import ConfigError
from d2lmat.experiment import (
    ExperimentConfig,
    Sweep,
    load_model,
    run_experiment,
    run_sweep,
    variant_config,
)

REPO = Path(__file__).resolve().parents[1]

TINY = {
    "name": "tiny",
    "data": {"n_classes": 4, "dim": 8, "n_patches": 2, "n_total": 300, "n_test": 100, "seed": 1},
    "split": {"p": 0.2, "seed": 1},
    "train": {"epochs": 4, "warmup_epochs": 2, "lr": 0.01, "hidden": 8, "seed": 1},
    "figures": False,
}


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


def test_config_errors_carry_field_paths():
    with pytest.raises(ConfigError, match=r"data\.n_classes"):
        ExperimentConfig.from_dict({**TINY, "data": {**TINY["data"], "n_classes": 0}})
    with pytest.raises(ConfigError, match=r"train\.lr"):
        ExperimentConfig.from_dict({**TINY, "train": {"lr": -1}})
    with pytest.raises(ConfigError, match=r"split\.p"):
        ExperimentConfig.from_dict({**TINY, "split": {"p": 1.5}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**TINY, "extra": 1})


def test_run_writes_all_artifacts(tmp_path):
    cfg = ExperimentConfig.from_dict({**TINY, "figures": True})
    rep = run_experiment(cfg, out_dir=tmp_path)
    for f in ("report.json", "trace.csv", "tau_trace.csv", "test_scores.csv", "test_labels.csv",
              "model.npz", "figures/test_trace.png", "figures/thresholds.png"):
        assert (tmp_path / f).exists(), f
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk["config"]["train"]["epochs"] == 4
    assert "wall_time_s" in on_disk
    fin = on_disk["final"]["test"]
    assert all(0.0 <= fin[k] <= 1.0 for k in ("mAP", "CF1", "OF1"))
    assert rep["dataset"]["K"] == 4
    with open(tmp_path / "tau_trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "class_0", "class_1", "class_2", "class_3"]
    assert len(rows) == 1 + 2  # two main epochs


def test_saved_model_reproduces_scores(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY)
    run_experiment(cfg, out_dir=tmp_path)
    model, tcfg, meta = load_model(tmp_path / "model.npz")
    assert (meta["K"], meta["d"]) == (4, 8)
    from d2lmat.experiment import build_dataset
    from d2lmat.training import evaluate, prepare

    test = prepare(build_dataset(cfg), tcfg)[2]
    scores = evaluate(model, test, tcfg)["scores"]
    # CSV cells are 17 significant digits, so the round trip is exact
    assert np.array_equal(scores, load_matrix(tmp_path / "test_scores.csv"))


def test_variant_config_applies_seed_and_overrides():
    d = variant_config(TINY, {"name": "v", "set": {"train.beta": 2.0, "data.n_patches": 1}}, 7)
    assert d["data"]["seed"] == d["split"]["seed"] == d["train"]["seed"] == 7
    assert d["train"]["beta"] == 2.0 and d["data"]["n_patches"] == 1
    assert TINY["data"]["seed"] == 1  # base untouched


def test_sweep_axis_expansion():
    sw = Sweep.from_dict({"base": TINY, "seeds": [0], "axis": {"name": "alpha", "paths": ["train.alpha"],
                                                               "values": [0.5, 2.0]}})
    assert [v["name"] for v in sw.variants] == ["alpha=0.5", "alpha=2.0"]


def test_sweep_rejects_bad_variant():
    with pytest.raises(ConfigError):
        Sweep.from_dict({"base": TINY, "seeds": [0], "variants": [{"name": "x", "set": {"train.beta": -1}}]})
    with pytest.raises(ConfigError):
        Sweep.from_dict({"base": TINY, "seeds": []})


def test_sweep_outputs(tmp_path):
    sw = Sweep.from_dict({"name": "s", "base": TINY, "seeds": [0, 1], "figures": False,
                          "variants": [{"name": "mat", "set": {}},
                                       {"name": "sup", "set": {"train.strategy": "supervised"}}]})
    res = run_sweep(sw, out_dir=tmp_path)
    with open(tmp_path / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["variant"], r["seed"]) for r in rows] == [("mat", "0"), ("mat", "1"), ("sup", "0"), ("sup", "1")]
    assert (tmp_path / "summary.csv").exists() and (tmp_path / "pl_trace.csv").exists()
    assert [s["variant"] for s in res["summary"]] == ["mat", "sup"]
    assert rows[2]["pl_CF1"] == ""  # supervised runs make no pseudo-labels


def test_shipped_configs_match_presets():
    for name, cfg in presets.all_configs().items():
        shipped = json.loads((REPO / "configs" / f"{name}.json").read_text())
        assert shipped == cfg, name
        (Sweep.from_dict if "base" in cfg else ExperimentConfig.from_dict)(shipped)


def test_bench_experiment_matches_required_shape():
    d = presets.bench_experiment("mat")
    data = d["data"]
    assert (data["n_classes"], data["dim"], data["n_patches"]) == (10, 32, 4)
    assert data["n_total"] - data["n_test"] == 2100 and data["n_test"] == 1000
    assert d["split"]["p"] == 0.05


# --- CLI -------------------------------------------------------------------


@pytest.fixture
def runner(tmp_path, monkeypatch):
    monkeypatch.setenv("D2LMAT_OUTPUT_DIR", str(tmp_path / "out"))
    return CliRunner()


def test_cli_train_evaluate_roundtrip(runner, tmp_path):
    cfg = write(tmp_path, "tiny.json", TINY)
    r = runner.invoke(main, ["train", str(cfg)])
    assert r.exit_code == 0, r.output
    run_dir = tmp_path / "out" / "tiny"
    assert (run_dir / "report.json").exists()
    r = runner.invoke(main, ["generate-data", str(cfg)])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["evaluate", str(run_dir / "model.npz"), str(tmp_path / "out" / "tiny_data" / "test")])
    assert r.exit_code == 0, r.output
    ev = json.loads((tmp_path / "out" / "evaluate" / "report.json").read_text())
    train_rep = json.loads((run_dir / "report.json").read_text())
    assert ev["mAP"] == train_rep["final"]["test"]["mAP"]


def test_cli_calibrate_and_metrics_verify(runner, tmp_path, rng):
    s = rng.uniform(size=(40, 3))
    y = (rng.uniform(size=(40, 3)) < 0.4).astype(int)
    save_matrix(tmp_path / "s.csv", s)
    save_matrix(tmp_path / "y.csv", y)
    r = runner.invoke(main, ["calibrate", "--scores", str(tmp_path / "s.csv"), "--labels", str(tmp_path / "y.csv"),
                             "--step", "0.05", "--verify", "--out", str(tmp_path / "t.json")])
    assert r.exit_code == 0, r.output
    t = json.loads((tmp_path / "t.json").read_text())
    assert t["verified"] is True and len(t["tau"]) == 3
    r = runner.invoke(main, ["metrics", "--scores", str(tmp_path / "s.csv"), "--labels", str(tmp_path / "y.csv"),
                             "--verify"])
    assert r.exit_code == 0, r.output
    rep = json.loads((tmp_path / "out" / "metrics" / "report.json").read_text())
    assert rep["verified"] is True


def test_cli_exit_codes(runner, tmp_path):
    bad_cfg = write(tmp_path, "bad.json", {"data": {"bogus": 1}})
    r = runner.invoke(main, ["train", str(bad_cfg)])
    assert r.exit_code == 2 and "data" in r.output
    (tmp_path / "notjson.json").write_text("{")
    assert runner.invoke(main, ["train", str(tmp_path / "notjson.json")]).exit_code == 2
    (tmp_path / "bad.csv").write_text("a,b\n1,zz\n")
    r = runner.invoke(main, ["metrics", "--scores", str(tmp_path / "bad.csv"), "--labels", str(tmp_path / "bad.csv")])
    assert r.exit_code == 3 and "row 2" in r.output
    r = runner.invoke(main, ["calibrate", "--scores", str(tmp_path / "bad.csv"), "--labels",
                             str(tmp_path / "bad.csv"), "--step", "0"])
    assert r.exit_code == 3


def test_cli_bad_step_is_config_error(runner, tmp_path):
    save_matrix(tmp_path / "s.csv", np.array([[0.2, 0.7]]))
    save_matrix(tmp_path / "y.csv", np.array([[0, 1]]))
    r = runner.invoke(main, ["calibrate", "--scores", str(tmp_path / "s.csv"), "--labels", str(tmp_path / "y.csv"),
                             "--step", "0"])
    assert r.exit_code == 2


def test_cli_compare(runner, tmp_path):
    sw = write(tmp_path, "sw.json", {"name": "sw", "base": TINY, "seeds": [0], "figures": False,
                                     "variants": [{"name": "mat", "set": {}}]})
    r = runner.invoke(main, ["compare", str(sw)])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "out" / "sw" / "comparison.csv").exists()
