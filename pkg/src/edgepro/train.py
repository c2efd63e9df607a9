"""Lock training: clean batches in authorized mode, wrong-label batches unlocked."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from edgepro import nn
from edgepro.data import Dataset
from edgepro.lock import AuthorizationKey, accuracy, lock_plan

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. ``checkpoint`` holds the last finite-loss network."""

    def __init__(self, message, checkpoint: nn.Network, report: "TrainReport"):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.report = report


@dataclass
class SplitDataset:
    clean: Dataset
    obfuscated: Dataset
    true_labels: np.ndarray  # original labels of the obfuscated half
    clean_ids: np.ndarray
    obfuscated_ids: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.clean.num_classes


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 64
    max_epochs: int = 20
    loss_threshold: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.loss_threshold > 0:
            raise ValueError("loss_threshold must be > 0")


@dataclass
class TrainReport:
    epochs_run: int = 0
    final_loss: float = math.nan
    losses: list = field(default_factory=list)
    acc_nl: list = field(default_factory=list)
    acc_nu: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    seconds: float = 0.0
    converged: bool = False

    @property
    def history(self) -> list[tuple[float, float]]:
        return list(zip(self.acc_nl, self.acc_nu))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def split_and_obfuscate(dataset: Dataset, num_classes: int | None = None, seed=0) -> SplitDataset:
    """Shuffle, halve, and give the second half uniformly random wrong labels."""
    num_classes = dataset.num_classes if num_classes is None else num_classes
    if num_classes < 2:
        raise ValueError("need at least two classes to draw a wrong label")
    if len(dataset) < 2:
        raise ValueError("need at least two examples to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    half = (len(dataset) + 1) // 2
    clean_ids, obf_ids = np.sort(order[:half]), np.sort(order[half:])
    true = dataset.y[obf_ids]
    wrong = (true + rng.integers(1, num_classes, size=len(true))) % num_classes
    return SplitDataset(
        clean=Dataset(dataset.x[clean_ids], dataset.y[clean_ids], num_classes),
        obfuscated=Dataset(dataset.x[obf_ids], wrong, num_classes),
        true_labels=true,
        clean_ids=clean_ids,
        obfuscated_ids=obf_ids,
    )


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def lock_train(
    net: nn.Network,
    key: AuthorizationKey,
    split: SplitDataset,
    cfg: TrainConfig,
    eval_set: Dataset | None = None,
):
    """Train a copy of ``net`` so it only works under ``key``.

    Every iteration takes one locked SGD step on a clean batch (true labels)
    and one plain step on an obfuscated batch (wrong labels). Stops after
    ``cfg.max_epochs`` or once the epoch-mean clean loss drops below
    ``cfg.loss_threshold``. Per-epoch accuracies are measured on ``eval_set``,
    defaulting to the clean half.
    """
    net = net.copy()
    plan = lock_plan(net, key)
    rng = np.random.default_rng(cfg.seed)
    probe = eval_set if eval_set is not None else split.clean
    clean, obf = split.clean, split.obfuscated
    report = TrainReport()
    started = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        checkpoint = net.copy()
        clean_batches = _batches(len(clean), cfg.batch_size, rng)
        obf_batches = _batches(len(obf), cfg.batch_size, rng)
        losses = []
        for step in range(max(len(clean_batches), len(obf_batches))):
            if step < len(clean_batches):
                b = clean_batches[step]
                loss, grads = nn.loss_and_grad(net, clean.x[b], clean.y[b], lock=plan)
                if not math.isfinite(loss):
                    report.seconds = time.perf_counter() - started
                    raise TrainingDiverged(
                        f"clean-locked loss became {loss} in epoch {epoch}, step {step}",
                        checkpoint, report,
                    )
                nn.sgd_step(net, grads, cfg.lr)
                losses.append(loss)
            if step < len(obf_batches):
                b = obf_batches[step]
                loss_o, grads = nn.loss_and_grad(net, obf.x[b], obf.y[b])
                if not math.isfinite(loss_o):
                    report.seconds = time.perf_counter() - started
                    raise TrainingDiverged(
                        f"obfuscated loss became {loss_o} in epoch {epoch}, step {step}",
                        checkpoint, report,
                    )
                nn.sgd_step(net, grads, cfg.lr)
        if not all(np.isfinite(p).all() for p in net.parameters()):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}",
                                   checkpoint, report)
        report.epoch_seconds.append(time.perf_counter() - t0)
        mean_loss = float(np.mean(losses))
        report.losses.append(mean_loss)
        report.acc_nl.append(accuracy(net, probe.x, probe.y, key))
        report.acc_nu.append(accuracy(net, probe.x, probe.y))
        report.epochs_run = epoch + 1
        report.final_loss = mean_loss
        log.info("epoch %d loss %.5f acc_nl %.4f acc_nu %.4f", epoch + 1, mean_loss,
                 report.acc_nl[-1], report.acc_nu[-1])
        if mean_loss < cfg.loss_threshold:
            report.converged = True
            break
    report.seconds = time.perf_counter() - started
    return net, report


def normal_train(net: nn.Network, dataset: Dataset, cfg: TrainConfig, eval_set=None):
    """Plain SGD on true labels; the unprotected baseline."""
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    probe = eval_set if eval_set is not None else dataset
    report = TrainReport()
    started = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        losses = []
        for b in _batches(len(dataset), cfg.batch_size, rng):
            loss, grads = nn.loss_and_grad(net, dataset.x[b], dataset.y[b])
            nn.sgd_step(net, grads, cfg.lr)
            losses.append(loss)
        report.epoch_seconds.append(time.perf_counter() - t0)
        report.losses.append(float(np.mean(losses)))
        acc = accuracy(net, probe.x, probe.y)
        report.acc_nl.append(acc)
        report.acc_nu.append(acc)
        report.epochs_run = epoch + 1
        report.final_loss = report.losses[-1]
        if report.final_loss < cfg.loss_threshold:
            report.converged = True
            break
    report.seconds = time.perf_counter() - started
    return net, report
