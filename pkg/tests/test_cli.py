import csv
import json

import pytest
from click.testing import CliRunner

from edgepro import nn
from edgepro.cli import PASSPHRASE_ENV, main

CONFIG = {
    "model": {"type": "mlp", "hidden": [16, 8]},
    "dataset": {"type": "synth", "n": 600, "test_n": 200, "num_classes": 3, "dim": 6,
                "separation": 4.0},
    "lock": {"rho": 20},
    "train": {"lr": 0.05, "batch_size": 16, "max_epochs": 8},
    "seed": 1,
}


@pytest.fixture
def runner(monkeypatch):
    monkeypatch.setenv(PASSPHRASE_ENV, "hunter2")
    return CliRunner()


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(CONFIG))
    return path


@pytest.fixture
def trained(runner, config, tmp_path):
    out = tmp_path / "run"
    res = runner.invoke(main, ["train", "--config", str(config), "--out", str(out)])
    assert res.exit_code == 0, res.output
    return out


def test_train_writes_artifacts(trained):
    assert {p.name for p in trained.iterdir()} == {"model.epnn", "key.epkey", "report.json"}
    report = json.loads((trained / "report.json").read_text())
    assert report["final"]["acc_nl"] > report["final"]["acc_nu"]
    assert "values" not in json.dumps(report["key"])  # no secrets in the report


def test_eval_with_and_without_key(runner, trained, config):
    args = ["eval", "--model", str(trained / "model.epnn"), "--config", str(config)]
    locked = json.loads(runner.invoke(main, args + ["--key", str(trained / "key.epkey")]).output)
    plain = json.loads(runner.invoke(main, args).output)
    report = json.loads((trained / "report.json").read_text())
    assert locked["acc_nl"] == report["final"]["acc_nl"]
    assert plain["acc_nu"] == locked["acc_nu"]
    assert "acc_nl" not in plain


def test_wrong_passphrase_exit_4(runner, trained, config, monkeypatch):
    monkeypatch.setenv(PASSPHRASE_ENV, "wrong")
    res = runner.invoke(main, ["eval", "--model", str(trained / "model.epnn"), "--config",
                               str(config), "--key", str(trained / "key.epkey")])
    assert res.exit_code == 4


def test_corrupt_files_exit_5(runner, trained, config):
    model = trained / "model.epnn"
    raw = bytearray(model.read_bytes())
    raw[len(raw) // 2] ^= 0x10
    model.write_bytes(bytes(raw))
    res = runner.invoke(main, ["eval", "--model", str(model), "--config", str(config)])
    assert res.exit_code == 5
    key = trained / "key.epkey"
    key.write_bytes(b"JUNK" + key.read_bytes()[4:])
    res = runner.invoke(main, ["eval", "--model", str(trained / "report.json"), "--config",
                               str(config)])
    assert res.exit_code == 5


def test_bad_config_exit_2(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**CONFIG, "bogus": 1}))
    assert runner.invoke(main, ["train", "--config", str(bad)]).exit_code == 2
    bad.write_text("{not json")
    assert runner.invoke(main, ["train", "--config", str(bad)]).exit_code == 2


def test_missing_passphrase_exit_2(config, tmp_path, monkeypatch):
    monkeypatch.delenv(PASSPHRASE_ENV, raising=False)
    res = CliRunner().invoke(main, ["train", "--config", str(config), "--out",
                                    str(tmp_path / "x")])
    assert res.exit_code == 2
    assert not (tmp_path / "x").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(runner, tmp_path):
    # features around 1e200 overflow the first matmul
    cfg = {**CONFIG, "dataset": {**CONFIG["dataset"], "separation": 1e200}}
    path = tmp_path / "div.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "div"
    res = runner.invoke(main, ["train", "--config", str(path), "--out", str(out)])
    assert res.exit_code == 3
    assert json.loads((out / "report.json").read_text())["status"] == "diverged"
    nn.load(out / "checkpoint.epnn")


@pytest.mark.parametrize("kind,extra", [
    ("finetune", ["--epochs", "2"]),
    ("prune", ["--metric", "lrp", "--rate", "0.3"]),
    ("reverse", ["--budget", "500", "--max-pair-order", "1"]),
])
def test_attacks(runner, trained, config, kind, extra):
    out = trained / f"attack-{kind}"
    res = runner.invoke(main, ["attack", kind, "--model", str(trained / "model.epnn"),
                               "--key", str(trained / "key.epkey"), "--config", str(config),
                               "--fraction", "0.2", "--out", str(out)] + extra)
    assert res.exit_code == 0, res.output
    doc = json.loads((out / "report.json").read_text())
    assert doc["kind"] == kind
    assert 0 <= doc["acc_nu_after"] <= 1
    if kind == "reverse":
        assert doc["resources"]["candidate_evaluations"] <= 500


def test_reverse_needs_key(runner, trained, config):
    res = runner.invoke(main, ["attack", "reverse", "--model", str(trained / "model.epnn"),
                               "--config", str(config)])
    assert res.exit_code == 2


def test_sweep_csv(runner, config, tmp_path):
    out = tmp_path / "sweep"
    res = runner.invoke(main, ["sweep", "--config", str(config), "--parameter", "grange",
                               "--grid", "0.2:1,-1:1", "--out", str(out)])
    assert res.exit_code == 0, res.output
    with open(out / "sweep.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["setting"] for r in rows] == ["0.2:1", "-1:1"]
    assert [int(r["seed"]) for r in rows] == [1, 2]
    assert rows[0]["status"] == "ok" and float(rows[0]["acc_nl"]) > 0
    assert rows[1]["status"] == "error" and rows[1]["error"]


def test_sweep_rejects_bad_grid(runner, config):
    res = runner.invoke(main, ["sweep", "--config", str(config), "--parameter", "vrange",
                               "--grid", "0-1"])
    assert res.exit_code == 2
