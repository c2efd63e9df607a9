"""Neuron-level model authorization.

A locked network only classifies correctly when a secret set of neurons is
forced to secret values and every hidden layer is rescaled by a secret factor.
"""

from edgepro.data import Dataset, load_idx, load_mnist, synth_blobs
from edgepro.kernels import BACKEND
from edgepro.lock import (
    AuthorizationKey,
    EvalResult,
    KeyMismatchError,
    LayerLock,
    accuracy,
    evaluate,
    generate_key,
    locked_forward,
)
from edgepro.nn import Network, lenet1, mlp
from edgepro.train import TrainConfig, TrainingDiverged, lock_train, split_and_obfuscate

__version__ = "0.1.0"

__all__ = [
    "AuthorizationKey",
    "BACKEND",
    "Dataset",
    "EvalResult",
    "KeyMismatchError",
    "LayerLock",
    "Network",
    "TrainConfig",
    "TrainingDiverged",
    "accuracy",
    "evaluate",
    "generate_key",
    "lenet1",
    "load_idx",
    "load_mnist",
    "lock_train",
    "locked_forward",
    "mlp",
    "split_and_obfuscate",
    "synth_blobs",
]
