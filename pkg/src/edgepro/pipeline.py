"""Run configuration and the train-a-locked-model pipeline shared by the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from edgepro import nn
from edgepro.data import Dataset, load_idx, load_mnist, synth_blobs
from edgepro.lock import AuthorizationKey, evaluate, generate_key
from edgepro.select import DEFAULT_PROBE_SIZE, STRATEGIES, rank_neurons
from edgepro.train import TrainConfig, TrainReport, lock_train, normal_train, split_and_obfuscate

CONFIG_VERSION = 1
KEY_SEED_OFFSET = 100


class ConfigError(ValueError):
    """Invalid or unresolvable run configuration."""


@dataclass
class ModelSpec:
    """``hidden`` defaults to (256, 128) for an mlp and to none for lenet1."""

    type: str = "mlp"
    hidden: tuple | None = None
    channels: tuple = (4, 12)

    def __post_init__(self):
        if self.type not in ("mlp", "lenet1"):
            raise ConfigError(f"model.type must be 'mlp' or 'lenet1', got {self.type!r}")
        if self.hidden is None:
            self.hidden = (256, 128) if self.type == "mlp" else ()
        self.hidden = tuple(int(h) for h in self.hidden)
        self.channels = tuple(int(c) for c in self.channels)
        if any(h < 1 for h in self.hidden) or any(c < 1 for c in self.channels):
            raise ConfigError("model widths must be positive")
        if self.type == "mlp" and not self.hidden:
            raise ConfigError("an mlp needs at least one hidden layer to lock")
        if self.type == "lenet1" and len(self.channels) != 2:
            raise ConfigError("lenet1 takes exactly two channel counts")


@dataclass
class DatasetSpec:
    type: str = "mnist"
    dir: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = None
    test_limit: int | None = None
    n: int = 2000
    test_n: int = 1000
    num_classes: int = 10
    dim: int = 20
    separation: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.type not in ("mnist", "idx", "synth"):
            raise ConfigError(f"dataset.type must be mnist, idx or synth, got {self.type!r}")
        if self.type == "mnist" and not self.dir:
            raise ConfigError("dataset.dir is required for type 'mnist'")
        if self.type == "idx" and not (self.train_images and self.train_labels):
            raise ConfigError("dataset.train_images and dataset.train_labels are required")
        if (self.test_images is None) != (self.test_labels is None):
            raise ConfigError("dataset.test_images and dataset.test_labels go together")
        for name in ("limit", "test_limit"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ConfigError(f"dataset.{name} must be positive")
        if self.type == "synth" and (self.n < self.num_classes or self.num_classes < 2
                                     or self.dim < 1 or self.separation < 0 or self.test_n < 0):
            raise ConfigError("synth needs n >= num_classes >= 2, dim >= 1, separation >= 0")

    def resolve(self, base: Path) -> "DatasetSpec":
        """Copy with relative paths anchored at ``base``."""
        out = DatasetSpec(**asdict(self))
        for name in ("dir", "train_images", "train_labels", "test_images", "test_labels"):
            v = getattr(out, name)
            if v is not None and not Path(v).is_absolute():
                setattr(out, name, str(base / v))
        return out


@dataclass
class LockSpec:
    rho: float = 5.0
    value_range: tuple = (0.0, 1.0)
    gamma_range: tuple = (0.2, 1.0)
    strategy: str = "RNR"
    probe_size: int = DEFAULT_PROBE_SIZE
    pretrain_epochs: int = 2

    def __post_init__(self):
        self.value_range = tuple(float(v) for v in self.value_range)
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        self.strategy = str(self.strategy).upper()
        if not 0 < self.rho <= 100:
            raise ConfigError(f"lock.rho must lie in (0, 100], got {self.rho}")
        for name in ("value_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if len(getattr(self, name)) != 2 or not 0 <= lo < hi:
                raise ConfigError(f"lock.{name} must be [lo, hi] with 0 <= lo < hi")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"lock.strategy must be one of {STRATEGIES}")
        if self.probe_size < 1 or self.pretrain_epochs < 1:
            raise ConfigError("lock.probe_size and lock.pretrain_epochs must be positive")


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    lock: LockSpec = field(default_factory=LockSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out: str = "runs/latest"
    version: int = CONFIG_VERSION

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        version = doc.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        known = {"model", "dataset", "lock", "train", "seed", "out", "version"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        try:
            train_doc = dict(doc.get("train", {}))
            train_doc.setdefault("seed", seed)
            cfg = cls(
                model=ModelSpec(**doc.get("model", {})),
                dataset=DatasetSpec(**doc.get("dataset", {})),
                lock=LockSpec(**doc.get("lock", {})),
                train=TrainConfig(**train_doc),
                seed=seed,
                out=str(doc.get("out", "runs/latest")),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from None
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if base is not None:
            cfg.dataset = cfg.dataset.resolve(base)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(doc, base=path.parent)

    def to_dict(self) -> dict:
        return asdict(self)


def load_data(spec: DatasetSpec) -> tuple[Dataset, Dataset | None]:
    """``(train, test)``; ``test`` is None when no test data is configured."""
    try:
        if spec.type == "mnist":
            train = load_mnist(spec.dir, "train", spec.limit)
            test = load_mnist(spec.dir, "test", spec.test_limit)
        elif spec.type == "idx":
            train = load_idx(spec.train_images, spec.train_labels, spec.limit)
            test = (load_idx(spec.test_images, spec.test_labels, spec.test_limit)
                    if spec.test_images else None)
        else:
            full = synth_blobs(spec.n + spec.test_n, spec.num_classes, spec.dim,
                               spec.separation, spec.seed)
            train = full.subset(np.arange(spec.n))
            test = full.subset(np.arange(spec.n, spec.n + spec.test_n)) if spec.test_n else None
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file not found: {exc.filename}") from None
    return train, test


def build_model(spec: ModelSpec, input_shape, num_classes, seed=0) -> nn.Network:
    if spec.type == "mlp":
        return nn.mlp(input_shape, spec.hidden, num_classes, seed=seed)
    if len(input_shape) != 3:
        raise ConfigError(f"lenet1 needs (C, H, W) inputs, dataset gives {input_shape}")
    return nn.lenet1(input_shape, num_classes, seed=seed, channels=spec.channels,
                     hidden=spec.hidden)


def make_key(net: nn.Network, spec: LockSpec, train: Dataset, train_cfg: TrainConfig,
             seed=0) -> AuthorizationKey:
    """Draw a key; ranked strategies score neurons on a briefly pre-trained copy."""
    scores = None
    if spec.strategy != "RNR":
        cfg = TrainConfig(lr=train_cfg.lr, batch_size=train_cfg.batch_size,
                          max_epochs=spec.pretrain_epochs, seed=seed)
        pretrained, _ = normal_train(net, train, cfg)
        order = np.random.default_rng(seed).permutation(len(train))[:spec.probe_size]
        scores = rank_neurons(pretrained, train.x[np.sort(order)], spec.strategy, seed=seed)
    return generate_key(net, spec.rho, spec.value_range, spec.gamma_range,
                        seed=seed + KEY_SEED_OFFSET, importance_scores=scores)


@dataclass
class RunResult:
    net: nn.Network
    key: AuthorizationKey
    report: TrainReport
    final: dict


def run(cfg: RunConfig, train: Dataset | None = None, test: Dataset | None = None) -> RunResult:
    """Build, key and lock-train a model as described by ``cfg``.

    Per-epoch and final accuracies are measured on the test data when there is
    any, otherwise on the clean half of the training data. Raises
    :class:`edgepro.train.TrainingDiverged` on a non-finite loss.
    """
    if train is None:
        train, test = load_data(cfg.dataset)
    net = build_model(cfg.model, train.input_shape, train.num_classes, seed=cfg.seed)
    key = make_key(net, cfg.lock, train, cfg.train, seed=cfg.seed)
    split = split_and_obfuscate(train, seed=cfg.seed)
    probe = test if test is not None else split.clean
    trained, report = lock_train(net, key, split, cfg.train, eval_set=probe)
    final = evaluate(trained, probe, key).as_dict()
    return RunResult(trained, key, report, final)
