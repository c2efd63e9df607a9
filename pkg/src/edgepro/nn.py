"""Minimal float64 network engine: layers, forward/backward, SGD and checkpoints.

Activations are numpy arrays with a leading batch axis. Convolutional tensors
are NCHW. Only stride-1 valid convolutions and max pooling are supported,
enough for MLPs and LeNet-1 sized CNNs.

A *lock* is a mapping ``{layer position: (indices, values, scale)}``. After the
layer at that position runs, ``out[:, indices] = values`` and then
``out *= scale``. Positions come from :meth:`Network.lock_point`. The
backward pass treats replaced coordinates as constants.
"""

from __future__ import annotations

import copy
import io
import math
import struct
import zlib
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from edgepro import kernels

Lock = Mapping[int, "tuple[np.ndarray, np.ndarray, float]"]


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer that receives it."""


class CheckpointError(ValueError):
    """Raised for unreadable or corrupt model checkpoints."""


class Layer:
    kind = "layer"
    lockable = False

    def params(self) -> list[np.ndarray]:
        return []

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, gy, cache, need_input_grad=True):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "dense"
    lockable = True

    def __init__(self, weight, bias):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        if in_shape != (self.weight.shape[1],):
            raise ShapeError(f"expects input ({self.weight.shape[1]},), got {in_shape}")
        return (self.width,)

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, gy, x, need_input_grad=True):
        gw = gy.T @ x
        gb = gy.sum(axis=0)
        gx = gy @ self.weight if need_input_grad else None
        return gx, [gw, gb]

    def __repr__(self):
        return f"Dense({self.weight.shape[1]}->{self.width})"


class Conv2D(Layer):
    kind = "conv2d"
    lockable = True

    def __init__(self, weight, bias):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv2d kernels {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        out_c, in_c, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != in_c:
            raise ShapeError(f"expects ({in_c}, H, W) input, got {in_shape}")
        h, w = in_shape[1] - kh + 1, in_shape[2] - kw + 1
        if h < 1 or w < 1:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {in_shape}")
        return (out_c, h, w)

    def forward(self, x):
        x = np.ascontiguousarray(x)
        return kernels.conv2d_forward(x, self.weight, self.bias), x

    def backward(self, gy, x, need_input_grad=True):
        gx, gw, gb = kernels.conv2d_backward(x, self.weight, np.ascontiguousarray(gy))
        return (gx if need_input_grad else None), [gw, gb]

    def __repr__(self):
        o, c, kh, kw = self.weight.shape
        return f"Conv2D({c}->{o}, {kh}x{kw})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        y = np.maximum(x, 0.0)
        return y, y

    def backward(self, gy, y, need_input_grad=True):
        return gy * (y > 0), []


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, size=2, stride=None):
        self.size = int(size)
        self.stride = int(stride if stride is not None else size)
        if self.size < 1 or self.stride < 1:
            raise ShapeError("pool window and stride must be positive")

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < self.size or in_shape[2] < self.size:
            raise ShapeError(f"cannot pool {in_shape} with window {self.size}")
        c, h, w = in_shape
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)

    def forward(self, x):
        x = np.ascontiguousarray(x)
        y, arg = kernels.maxpool2d_forward(x, self.size, self.stride)
        return y, (arg, x.shape)

    def backward(self, gy, cache, need_input_grad=True):
        arg, shape = cache
        if not need_input_grad:
            return None, []
        return kernels.maxpool2d_backward(np.ascontiguousarray(gy), arg, tuple(shape)), []

    def __repr__(self):
        return f"MaxPool2D({self.size}, stride={self.stride})"


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, shape, need_input_grad=True):
        return gy.reshape(shape), []


class Network:
    """Ordered layers plus the input shape they expect."""

    def __init__(self, layers: Sequence[Layer], input_shape, num_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(layer.output_shape(self.shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        if self.shapes[-1] != (self.num_classes,):
            raise ShapeError(
                f"network ends in shape {self.shapes[-1]}, expected ({self.num_classes},)"
            )

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def lockable_layers(self) -> list[int]:
        """Positions of Dense/Conv2D layers that may carry authorization neurons.

        The final classifier is excluded; its outputs are the logits.
        """
        found = [i for i, layer in enumerate(self.layers) if layer.lockable]
        return found[:-1]

    def width(self, position: int) -> int:
        return self.layers[position].width

    def lock_point(self, position: int) -> int:
        """Position whose output is overwritten when locking ``position``.

        This is the ReLU directly after the layer when there is one, so locking
        acts on post-activation values.
        """
        nxt = position + 1
        if nxt < len(self.layers) and isinstance(self.layers[nxt], ReLU):
            return nxt
        return position

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Network(input={self.input_shape}, [{body}])"


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def dense(rng, n_in, n_out) -> Dense:
    return Dense(glorot_uniform(rng, (n_out, n_in), n_in, n_out), np.zeros(n_out))


def conv(rng, c_in, c_out, k) -> Conv2D:
    w = glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
    return Conv2D(w, np.zeros(c_out))


def mlp(input_shape, hidden: Sequence[int], num_classes: int, seed=0) -> Network:
    """Flatten, then ``Dense -> ReLU`` per hidden width, then a linear classifier."""
    rng = np.random.default_rng(seed)
    n_in = int(np.prod(input_shape))
    layers: list[Layer] = [Flatten()]
    for width in hidden:
        layers += [dense(rng, n_in, width), ReLU()]
        n_in = width
    layers.append(dense(rng, n_in, num_classes))
    return Network(layers, input_shape, num_classes)


def lenet1(input_shape=(1, 28, 28), num_classes=10, seed=0, channels=(4, 12),
           hidden: Sequence[int] = ()) -> Network:
    """LeNet-1: conv5(4) pool conv5(12) pool, then a linear classifier.

    ``hidden`` inserts ``Dense -> ReLU`` blocks between the conv trunk and the
    classifier.
    """
    rng = np.random.default_rng(seed)
    c = input_shape[0]
    c1, c2 = channels
    layers = [
        conv(rng, c, c1, 5), ReLU(), MaxPool2D(2),
        conv(rng, c1, c2, 5), ReLU(), MaxPool2D(2),
        Flatten(),
    ]
    probe = tuple(input_shape)
    for layer in layers:
        probe = layer.output_shape(probe)
    n_in = probe[0]
    for width in hidden:
        layers += [dense(rng, n_in, width), ReLU()]
        n_in = width
    layers.append(dense(rng, n_in, num_classes))
    return Network(layers, input_shape, num_classes)


def _check_batch(net: Network, batch: np.ndarray):
    if batch.ndim < 1 or batch.shape[0] < 1:
        raise ShapeError("batch must contain at least one example")
    if tuple(batch.shape[1:]) != net.input_shape:
        first = net.layers[0].kind if net.layers else "output"
        raise ShapeError(
            f"layer 0 ({first}): expects examples of shape {net.input_shape}, "
            f"got {tuple(batch.shape[1:])}"
        )


def _apply_lock(h, indices, values, scale):
    h = h.copy()
    if len(indices):
        if h.ndim == 2:
            h[:, indices] = values
        else:
            h[:, indices] = np.asarray(values).reshape((1, -1) + (1,) * (h.ndim - 2))
    h *= scale
    return h


def propagate(net: Network, h, start=0, lock: Lock | None = None, record=False, stop=None):
    """Run layers ``start..stop-1`` on ``h`` (the output of layer ``start - 1``).

    Returns ``(output, tape, outputs)``; ``tape`` holds the backward caches and
    ``outputs`` every (post-lock) layer output when ``record`` is set.
    """
    tape = []
    outputs = [] if record else None
    for i in range(start, len(net.layers) if stop is None else stop):
        h, cache = net.layers[i].forward(h)
        tape.append(cache)
        if lock is not None and i in lock:
            idx, vals, scale = lock[i]
            h = _apply_lock(h, idx, vals, scale)
        if record:
            outputs.append(h)
    return h, tape, outputs


def backprop(net: Network, tape, grad_out, lock: Lock | None = None, observe=None,
             start=0):
    """Reverse pass matching :func:`propagate`.

    Returns per-layer parameter gradients (list of lists). If ``observe`` is a
    dict, ``observe[i]`` receives the gradient w.r.t. the output of layer ``i``.
    """
    grads: list[list[np.ndarray]] = [[] for _ in net.layers]
    g = grad_out
    for i in range(len(net.layers) - 1, start - 1, -1):
        if observe is not None:
            observe[i] = g
        if lock is not None and i in lock:
            idx, _, scale = lock[i]
            g = g * scale
            if len(idx):
                g[:, idx] = 0.0
        g, grads[i] = net.layers[i].backward(g, tape[i - start], need_input_grad=i > start)
    return grads


def forward(net: Network, batch, lock: Lock | None = None) -> np.ndarray:
    """Logits for ``batch``; ``lock`` as described in the module docstring."""
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(net, batch)
    return propagate(net, batch, lock=lock)[0]


def predict(net: Network, X, lock: Lock | None = None, batch_size=2048) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    _check_batch(net, X)
    out = [
        propagate(net, X[i:i + batch_size], lock=lock)[0].argmax(axis=1)
        for i in range(0, len(X), batch_size)
    ]
    return np.concatenate(out)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def loss_and_grad(net: Network, batch, labels, lock: Lock | None = None):
    """Mean softmax cross-entropy and the gradient for every parameter.

    Gradients come back as a flat list in :meth:`Network.parameters` order.
    """
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(net, batch)
    logits, tape, _ = propagate(net, batch, lock=lock)
    loss, g = softmax_cross_entropy(logits, labels)
    per_layer = backprop(net, tape, g, lock=lock)
    return loss, [g for layer_grads in per_layer for g in layer_grads]


def sgd_step(net: Network, grads: Sequence[np.ndarray], lr: float) -> Network:
    """In-place ``p -= lr * g`` over all parameters; returns ``net``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    params = net.parameters()
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient {i} has shape {np.shape(g)}, parameter {p.shape}")
    if lr == 0:
        return net
    for p, g in zip(params, grads):
        p -= lr * g
    return net


# -- checkpoints -----------------------------------------------------------

MAGIC = b"EPNN"
VERSION = 1
_TAGS = {"dense": 1, "conv2d": 2, "relu": 3, "maxpool2d": 4, "flatten": 5}


def _write_array(buf, a):
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def to_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<B", len(net.input_shape)))
    buf.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    buf.write(struct.pack("<II", net.num_classes, len(net.layers)))
    for layer in net.layers:
        buf.write(struct.pack("<B", _TAGS[layer.kind]))
        if isinstance(layer, (Dense, Conv2D)):
            shape = layer.weight.shape
            buf.write(struct.pack("<B", len(shape)))
            buf.write(struct.pack(f"<{len(shape)}I", *shape))
            _write_array(buf, layer.weight)
            _write_array(buf, layer.bias)
        elif isinstance(layer, MaxPool2D):
            buf.write(struct.pack("<II", layer.size, layer.stride))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape):
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def from_bytes(data: bytes) -> Network:
    """Parse a checkpoint; the trailing CRC-32 must match the body."""
    if data[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic at offset 0)")
    if len(data) < 10:
        raise CheckpointError(f"truncated checkpoint: {len(data)} bytes")
    data, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(data) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted or truncated)")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (ndim,) = r.unpack("<B")
    input_shape = r.unpack(f"<{ndim}I")
    num_classes, count = r.unpack("<II")
    layers: list[Layer] = []
    for _ in range(count):
        at = r.pos
        (tag,) = r.unpack("<B")
        if tag in (1, 2):
            (nd,) = r.unpack("<B")
            shape = r.unpack(f"<{nd}I")
            w = r.array(shape)
            b = r.array((shape[0],))
            layers.append((Dense if tag == 1 else Conv2D)(w, b))
        elif tag == 3:
            layers.append(ReLU())
        elif tag == 4:
            layers.append(MaxPool2D(*r.unpack("<II")))
        elif tag == 5:
            layers.append(Flatten())
        else:
            raise CheckpointError(f"unknown layer tag {tag} at offset {at}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after offset {r.pos}")
    try:
        return Network(layers, input_shape, num_classes)
    except ShapeError as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from None


def save(net: Network, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load(path) -> Network:
    return from_bytes(Path(path).read_bytes())
