import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from boostresnet.boost import read_rounds_csv
from boostresnet.cli import ConfigError, diagnose, load_config, load_datasets, main
from boostresnet.resnet import TrainedResNet

BASE = {
    "seed": 3,
    "dataset": {"kind": "generator", "name": "blobs", "params": {"m": 120, "separation": 4.0}},
    "architecture": {"k": 4, "T_max": 3},
    "boost": {"patience": 5},
    "oracle": {"epochs": 20, "learning_rate": 0.02, "batch_size": 32},
}


def write_config(tmp_path, cfg, name="exp.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run_boost(tmp_path, out="run", cfg=BASE):
    cfg = dict(cfg, output_dir=str(tmp_path / out))
    assert main(["train-boost", "--config", write_config(tmp_path, cfg)]) == 0
    return tmp_path / out


def test_train_boost_smoke(tmp_path, capsys):
    out = run_boost(tmp_path)
    for name in ("model.json", "bounds.json", "resolved_config.json"):
        json.loads((out / name).read_text())
    schema, rows = read_rounds_csv(out / "rounds.csv")
    assert schema == "boostresnet.rounds/1" and len(rows) == 4
    assert json.loads((out / "resolved_config.json").read_text())["architecture"]["T_max"] == 3
    assert "train accuracy" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path):
    a = run_boost(tmp_path, "a")
    b = run_boost(tmp_path, "b")
    assert (a / "rounds.csv").read_bytes() == (b / "rounds.csv").read_bytes()
    assert (a / "model.json").read_bytes() == (b / "model.json").read_bytes()


def test_model_round_trip(tmp_path):
    cfg = dict(BASE, output_dir=str(tmp_path / "rt"))
    out = run_boost(tmp_path, "rt")
    net = TrainedResNet.load(out / "model.json")
    x = np.random.default_rng(0).normal(size=(100, 2))
    from boostresnet.boost import BoostConfig, train_boostresnet
    from boostresnet.cli import _boost_config
    resolved = load_config(write_config(tmp_path, cfg, "rt.json"))
    train, _ = load_datasets(resolved)
    mem, _ = train_boostresnet(train.x, train.y, _boost_config(resolved))
    assert np.max(np.abs(net.scores(x) - mem.scores(x))) <= 1e-12
    assert isinstance(_boost_config(resolved), BoostConfig)


def test_multiclass_boost_run(tmp_path):
    cfg = dict(BASE, task="multiclass")
    cfg["dataset"] = {"kind": "generator", "name": "blobs", "params": {"m": 90, "C": 3}}
    out = run_boost(tmp_path, "mc", cfg)
    schema, rows = read_rounds_csv(out / "rounds.csv")
    assert schema == "boostresnet.rounds-multiclass/1" and "exp_loss" in rows[0]
    lines, ok = diagnose(out)
    assert ok


def test_e2e_depth_sweep(tmp_path):
    cfg = dict(BASE, output_dir=str(tmp_path / "e2e"), e2e={"depths": [1, 5, 10, 20]})
    cfg["oracle"] = {"epochs": 3, "learning_rate": 0.01, "batch_size": 32}
    assert main(["train-e2e", "--config", write_config(tmp_path, cfg)]) == 0
    for d in (1, 5, 10, 20):
        lines = (tmp_path / "e2e" / f"depth_{d}" / "epochs.csv").read_text().splitlines()
        assert lines[0] == "# schema: boostresnet.epochs/1"
        assert lines[1] == "epoch,lr,train_loss,train_acc,test_loss,test_acc"
        assert len(lines) == 2 + 1 + 3  # initial state plus one row per epoch


def test_e2e_depth_zero_matches_logistic_regression(tmp_path):
    cfg = dict(BASE, output_dir=str(tmp_path / "lin"), e2e={"depths": [0]})
    cfg["dataset"] = {"kind": "generator", "name": "blobs", "params": {"m": 400, "separation": 2.0}}
    cfg["oracle"] = {"epochs": 200, "learning_rate": 0.05, "batch_size": 400}
    assert main(["train-e2e", "--config", write_config(tmp_path, cfg)]) == 0
    train, _ = load_datasets(load_config(write_config(tmp_path, cfg, "lin.json")))
    net = TrainedResNet.load(tmp_path / "lin" / "depth_0" / "model.json")
    ours = float(np.mean(net.predict(train.x) == train.y_pm1()))
    ref = LogisticRegression(C=1e6, fit_intercept=False, max_iter=10000).fit(train.x, train.y)
    assert abs(ours - ref.score(train.x, train.y)) <= 0.005


@pytest.mark.parametrize("field,value,cmd", [
    ("architecture", {"T_max": -1}, "train-boost"),
    ("e2e", {"depths": [-1]}, "train-e2e"),
    ("boost", {"alpha_mode": "newton"}, "train-boost"),
    ("oracle", {"learning_rate": -1.0}, "train-boost"),
    ("surprise", 1, "train-boost"),
])
def test_validation_errors_exit_1(tmp_path, capsys, field, value, cmd):
    cfg = dict(BASE, output_dir=str(tmp_path / "v"))
    cfg[field] = value
    assert main([cmd, "--config", write_config(tmp_path, cfg)]) == 1
    assert field in capsys.readouterr().err


def test_config_error_names_field():
    with pytest.raises(ConfigError) as info:
        load_config(None, {"architecture.T_max": -2})
    assert info.value.field == "architecture.T_max"


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("BOOSTRESNET_OUTPUT_DIR", str(tmp_path / "env"))
    assert load_config()["output_dir"] == str(tmp_path / "env")


def test_missing_file_exit_1(tmp_path):
    assert main(["train-boost", "--config", str(tmp_path / "nope.json")]) == 1
    assert main(["diagnose", str(tmp_path / "nothing")]) == 1


def test_oracle_divergence_exit_2(tmp_path, capsys):
    cfg = dict(BASE, output_dir=str(tmp_path / "div"))
    cfg["oracle"] = {"epochs": 20, "learning_rate": 1e6, "batch_size": 8, "max_grad_norm": 1e300,
                     "init_scale": 50.0}
    assert main(["train-boost", "--config", write_config(tmp_path, cfg)]) == 2


def test_diagnose_all_pass_and_recompute(tmp_path, capsys):
    cfg = dict(BASE, dataset={"kind": "generator", "name": "blobs",
                              "params": {"m": 120, "separation": 1.5}})
    cfg["architecture"] = {"k": 4, "T_max": 1}
    cfg["boost"] = {"gamma_threshold": 1e-9, "alpha_mode": "exact"}
    out = run_boost(tmp_path, "diag", cfg)
    _, rows = read_rounds_csv(out / "rounds.csv")
    assert main(["diagnose", str(out)]) == 0
    text = capsys.readouterr().out
    assert "matches recomputation within 1e-10: yes" in text
    if all(r["gamma"] >= 1e-9 for r in rows):
        assert "all pass" in text
    # corrupting a stored product is caught
    path = out / "rounds.csv"
    lines = path.read_text().splitlines()
    head, first = lines[1].split(","), lines[2].split(",")
    first[head.index("Z_product")] = repr(float(first[head.index("Z_product")]) * 1.001)
    lines[2] = ",".join(first)
    path.write_text("\n".join(lines) + "\n")
    assert diagnose(out)[1] is False


def test_eval_perfect_model(tmp_path, capsys):
    model = TrainedResNet([], np.array([1.0, 0.0]))
    model.save(tmp_path / "model.json")
    cfg = {"dataset": {"kind": "generator", "name": "blobs",
                       "params": {"m": 100, "separation": 20.0}}}
    assert main(["eval", "--model", str(tmp_path / "model.json"),
                 "--config", write_config(tmp_path, cfg)]) == 0
    assert "accuracy 1.000000" in capsys.readouterr().out


def test_cli_flags_override_config(tmp_path):
    out = tmp_path / "flags"
    assert main(["train-boost", "--config", write_config(tmp_path, BASE), "--T-max", "1",
                 "--output-dir", str(out), "--alpha-mode", "closed-form"]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["architecture"]["T_max"] == 1 and resolved["boost"]["alpha_mode"] == "closed-form"
