import os
from pathlib import Path

import numpy as np
import pytest

from edgepro import nn
from edgepro.data import synth_blobs
from edgepro.lock import AuthorizationKey, LayerLock

MNIST_DIR = Path(os.environ.get("EDGEPRO_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = (
    "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte",
)


def have_mnist() -> bool:
    return all((MNIST_DIR / f).exists() for f in MNIST_FILES)


needs_mnist = pytest.mark.skipif(
    not have_mnist(), reason=f"MNIST IDX files not found in {MNIST_DIR} (set EDGEPRO_MNIST_DIR)"
)

# cheap scrypt so keystore tests stay fast
FAST_KDF = {"log2_n": 4, "r": 8, "p": 1}


def tiny_cnn(seed=0, hidden=(5,)):
    rng = np.random.default_rng(seed)
    layers = [nn.conv(rng, 1, 2, 3), nn.ReLU(), nn.MaxPool2D(2), nn.conv(rng, 2, 3, 2), nn.ReLU(),
              nn.Flatten()]
    n_in = 3 * 2 * 2
    for w in hidden:
        layers += [nn.dense(rng, n_in, w), nn.ReLU()]
        n_in = w
    layers.append(nn.dense(rng, n_in, 3))
    return nn.Network(layers, (1, 8, 8), 3)


def random_key(net, rng, max_neurons=2, gamma=(0.2, 1.5), value=(0.0, 2.0)):
    layers = []
    for pos in net.lockable_layers():
        w = net.width(pos)
        k = int(rng.integers(0, min(max_neurons, w) + 1))
        idx = np.sort(rng.choice(w, size=k, replace=False))
        vals = rng.uniform(*value, size=k)
        layers.append(LayerLock(pos, tuple(int(i) for i in idx), tuple(float(v) for v in vals),
                                float(rng.uniform(*gamma))))
    return AuthorizationKey(tuple(layers))


@pytest.fixture
def blobs():
    return synth_blobs(600, 4, 8, 4.0, seed=3)


@pytest.fixture
def small_mlp():
    return nn.mlp((8,), [16, 12], 4, seed=1)


# -- acceptance verdicts ------------------------------------------------------

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one ``PASS``/``FAIL`` line; all lines are repeated in the summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(label, ok, detail=""):
        line = f"criterion {label:<3} {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
