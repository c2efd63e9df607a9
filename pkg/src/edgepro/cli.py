"""``edgepro`` command line: train, eval, attack, sweep.

Exit codes: 0 ok, 2 bad configuration or usage, 3 training diverged,
4 key authentication failed, 5 corrupted model or key file.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from edgepro import attacks, keystore, nn
from edgepro.data import Dataset, IdxFormatError, load_mnist
from edgepro.lock import KeyMismatchError, evaluate
from edgepro.pipeline import ConfigError, LockSpec, RunConfig, load_data, run
from edgepro.train import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_AUTH, EXIT_CORRUPT = 0, 2, 3, 4, 5
PASSPHRASE_ENV = "EDGEPRO_PASSPHRASE"

log = logging.getLogger("edgepro")


class Fail(click.ClickException):
    def __init__(self, message, code):
        super().__init__(message)
        self.exit_code = code


def _passphrase(required=True) -> str | None:
    value = os.environ.get(PASSPHRASE_ENV)
    if value:
        return value
    if sys.stdin is not None and sys.stdin.isatty():
        return click.prompt("Passphrase", hide_input=True)
    if required:
        raise Fail(f"no passphrase: set {PASSPHRASE_ENV}", EXIT_CONFIG)
    return None


def _load_config(path, seed=None, out=None, limit=None) -> RunConfig:
    try:
        cfg = RunConfig.load(path)
    except ConfigError as exc:
        raise Fail(str(exc), EXIT_CONFIG) from None
    if seed is not None:
        cfg.seed = seed
        cfg.train = replace(cfg.train, seed=seed)
    if out is not None:
        cfg.out = str(out)
    if limit is not None:
        cfg.dataset = replace(cfg.dataset, limit=limit)
    return cfg


def _load_model(path) -> nn.Network:
    try:
        return nn.load(path)
    except OSError as exc:
        raise Fail(f"cannot read model: {exc}", EXIT_CONFIG) from None
    except nn.CheckpointError as exc:
        raise Fail(f"corrupted model file {path}: {exc}", EXIT_CORRUPT) from None


def _load_key(path, passphrase):
    try:
        return keystore.load_key(path, passphrase)
    except OSError as exc:
        raise Fail(f"cannot read key: {exc}", EXIT_CONFIG) from None
    except keystore.AuthenticationError as exc:
        raise Fail(str(exc), EXIT_AUTH) from None
    except keystore.KeyFileFormatError as exc:
        raise Fail(f"corrupted key file {path}: {exc}", EXIT_CORRUPT) from None


def _eval_data(config, dataset, split, limit) -> Dataset:
    """Evaluation data from a run config (its test part) or an IDX directory."""
    try:
        if dataset is not None:
            return load_mnist(dataset, split, limit)
        if config is not None:
            cfg = _load_config(config)
            train, test = load_data(cfg.dataset)
            data = test if test is not None else train
            return data.subset(np.arange(min(len(data), limit))) if limit else data
    except (OSError, ConfigError) as exc:
        raise Fail(f"cannot load dataset: {exc}", EXIT_CONFIG) from None
    except IdxFormatError as exc:
        raise Fail(f"corrupted dataset: {exc}", EXIT_CORRUPT) from None
    raise Fail("give --dataset DIR or --config FILE", EXIT_CONFIG)


def _emit(doc, out=None, name="report.json"):
    text = json.dumps(doc, indent=2)
    click.echo(text)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text + "\n")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress to stderr.")
def main(verbose):
    """Train, evaluate and attack neuron-locked models."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--limit", type=int, default=None, help="Override the training set size.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def train(config_path, seed, limit, out):
    """Lock-train a model; writes model.epnn, key.epkey and report.json."""
    cfg = _load_config(config_path, seed, out, limit)
    passphrase = _passphrase()
    try:
        result = run(cfg)
    except ConfigError as exc:
        raise Fail(str(exc), EXIT_CONFIG) from None
    except IdxFormatError as exc:
        raise Fail(f"corrupted dataset: {exc}", EXIT_CORRUPT) from None
    except KeyMismatchError as exc:
        raise Fail(str(exc), EXIT_CONFIG) from None
    except TrainingDiverged as exc:
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        nn.save(exc.checkpoint, out_dir / "checkpoint.epnn")
        doc = {"config": cfg.to_dict(), "status": "diverged", "error": str(exc),
               "train": json.loads(exc.report.to_json())}
        (out_dir / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
        raise Fail(f"training diverged: {exc}", EXIT_DIVERGED) from None
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    nn.save(result.net, out_dir / "model.epnn")
    keystore.save_key(result.key, out_dir / "key.epkey", passphrase)
    doc = {
        "config": cfg.to_dict(),
        "status": "converged" if result.report.converged else "max_epochs",
        "final": result.final,
        "key": {"layers": [ll.layer for ll in result.key.layers],
                "authorized_neurons": result.key.neuron_count()},
        "train": json.loads(result.report.to_json()),
    }
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    click.echo(json.dumps(result.final))


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--key", "key_path", default=None, type=click.Path(dir_okay=False))
@click.option("--dataset", default=None, type=click.Path(file_okay=False),
              help="Directory with MNIST-style IDX files.")
@click.option("--split", type=click.Choice(["train", "test"]), default="test")
@click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False),
              help="Use the test data of this run config instead of --dataset.")
@click.option("--limit", type=int, default=None)
def eval_cmd(model_path, key_path, dataset, split, config_path, limit):
    """Print acc_nu, plus acc_nl when a key is given, as JSON."""
    net = _load_model(model_path)
    key = _load_key(key_path, _passphrase()) if key_path else None
    data = _eval_data(config_path, dataset, split, limit)
    try:
        result = evaluate(net, data, key)
    except (KeyMismatchError, nn.ShapeError) as exc:
        raise Fail(str(exc), EXIT_CONFIG) from None
    click.echo(json.dumps(result.as_dict()))


def _parse_grid(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise Fail(f"bad value grid {text!r}", EXIT_CONFIG) from None


@main.command()
@click.argument("kind", type=click.Choice(["finetune", "prune", "reverse"]))
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--key", "key_path", default=None, type=click.Path(dir_okay=False),
              help="Reverse engineering: source of the known scale factors and acc_nl.")
@click.option("--dataset", default=None, type=click.Path(file_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False))
@click.option("--limit", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--fraction", type=float, default=0.1, show_default=True,
              help="Share of the data given to the attacker (holdout or probe).")
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--metric", type=click.Choice(["avgact", "gradcam", "lrp"], case_sensitive=False),
              default="avgact", show_default=True)
@click.option("--rate", type=float, default=0.2, show_default=True)
@click.option("--knowledge", type=click.Choice(["all", "half"], case_sensitive=False),
              default="half", show_default=True)
@click.option("--budget", type=int, default=100_000, show_default=True)
@click.option("--grid", default=",".join(f"{v:g}" for v in attacks.DEFAULT_GRID),
              show_default=True)
@click.option("--max-pair-order", type=int, default=2, show_default=True)
@click.option("--threshold", type=float, default=0.9, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def attack(kind, model_path, key_path, dataset, config_path, limit, seed, fraction, epochs,
           lr, batch_size, metric, rate, knowledge, budget, grid, max_pair_order, threshold,
           out):
    """Run an adaptive attack and print its report as JSON."""
    net = _load_model(model_path)
    data = _eval_data(config_path, dataset, "test", limit)
    if not 0 < fraction < 1:
        raise Fail("--fraction must lie in (0, 1)", EXIT_CONFIG)
    attacker, rest = data.split(fraction, seed=seed)
    try:
        if kind == "finetune":
            report = attacks.finetune_attack(net, attacker, rest, epochs, lr, batch_size, seed)
        elif kind == "prune":
            report = attacks.prune_attack(net, metric, rate, attacker, rest, seed)
        else:
            if key_path is None:
                raise Fail("reverse engineering needs --key for the known scale factors",
                           EXIT_CONFIG)
            key = _load_key(key_path, _passphrase())
            reference = evaluate(net, attacker, key).acc_nl
            report = attacks.reverse_engineer(
                net, key.scales, knowledge, attacker, reference,
                value_grid=_parse_grid(grid), success_threshold=threshold, budget=budget,
                max_pair_order=max_pair_order,
                hint_layers=[ll.layer for ll in key.layers if ll.indices],
            )
    except (ValueError, KeyMismatchError) as exc:
        raise Fail(str(exc), EXIT_CONFIG) from None
    _emit(report.to_dict(), out)


def _parse_setting(parameter, text):
    if parameter == "rho":
        return float(text)
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ValueError(f"range setting {text!r} must look like lo:hi")
    return (float(lo), float(hi))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--parameter", type=click.Choice(["rho", "vrange", "grange"]), required=True)
@click.option("--grid", required=True,
              help="Comma-separated settings: 5,10,50 for rho, 0:1,8:16 for ranges.")
@click.option("--seed", type=int, default=None)
@click.option("--limit", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def sweep(config_path, parameter, grid, seed, limit, out):
    """One lock-training run per grid point; writes sweep.csv."""
    cfg = _load_config(config_path, seed, out, limit)
    try:
        settings = [_parse_setting(parameter, t.strip()) for t in grid.split(",") if t.strip()]
    except ValueError as exc:
        raise Fail(f"bad grid: {exc}", EXIT_CONFIG) from None
    if not settings:
        raise Fail("grid is empty", EXIT_CONFIG)
    try:
        train_data, test_data = load_data(cfg.dataset)
    except ConfigError as exc:
        raise Fail(str(exc), EXIT_CONFIG) from None
    field_name = {"rho": "rho", "vrange": "value_range", "grange": "gamma_range"}[parameter]
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, setting in enumerate(settings):
        label = f"{setting:g}" if parameter == "rho" else f"{setting[0]:g}:{setting[1]:g}"
        row = {"parameter": parameter, "setting": label, "seed": cfg.seed + i,
               "acc_nl": "", "acc_nu": "", "epoch_seconds": "", "status": "ok", "error": ""}
        try:
            lock_doc = {**vars(cfg.lock), field_name: setting}
            point = replace(cfg, seed=cfg.seed + i, lock=LockSpec(**lock_doc),
                            train=replace(cfg.train, seed=cfg.seed + i))
            result = run(point, train_data, test_data)
            row.update(acc_nl=result.final["acc_nl"], acc_nu=result.final["acc_nu"],
                       epoch_seconds=float(np.mean(result.report.epoch_seconds)))
        except TrainingDiverged as exc:
            row.update(status="diverged", error=str(exc))
        except (ValueError, KeyMismatchError) as exc:
            row.update(status="error", error=str(exc))
        rows.append(row)
        log.info("sweep %s=%s: %s", parameter, label, row)
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    click.echo(str(out_dir / "sweep.csv"))


if __name__ == "__main__":
    main()
