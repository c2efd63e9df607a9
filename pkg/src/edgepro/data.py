"""Datasets: MNIST-style IDX files and synthetic Gaussian blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# IDX element type codes we read/write besides unsigned bytes.
_FLOAT_TYPES = {0x0D: ">f4", 0x0E: ">f8"}


class IdxFormatError(ValueError):
    """Malformed IDX file; the message carries the byte offset."""


@dataclass
class Dataset:
    x: np.ndarray  # (N, *input_shape) float64
    y: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} examples but {len(self.y)} labels")
        if len(self.y) == 0:
            raise ValueError("dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def split(self, fraction: float, seed=0) -> tuple["Dataset", "Dataset"]:
        """Random ``(first, rest)`` with ``round(fraction * N)`` examples in ``first``."""
        order = np.random.default_rng(seed).permutation(len(self))
        k = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:k])), self.subset(np.sort(order[k:]))


def _header(data: bytes, path, expected_magic: int, ndim: int):
    if len(data) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header at offset {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    return magic, dims, 4 + 4 * ndim


def read_idx_images(path, limit=None) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    type_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 != 0 or ndim < 1 or (type_code != 0x08 and type_code not in _FLOAT_TYPES):
        raise IdxFormatError(
            f"{path}: bad image magic 0x{magic:08x} at offset 0 (expected 0x{IMAGES_MAGIC:08x})"
        )
    _, dims, offset = _header(data, path, magic, ndim)
    count = dims[0] if limit is None else min(dims[0], int(limit))
    item = int(np.prod(dims[1:]))
    dtype = np.dtype(">u1") if type_code == 0x08 else np.dtype(_FLOAT_TYPES[type_code])
    need = offset + dims[0] * item * dtype.itemsize
    if len(data) < need:
        raise IdxFormatError(
            f"{path}: truncated payload, file ends at offset {len(data)}, expected {need}"
        )
    arr = np.frombuffer(data, dtype=dtype, count=count * item, offset=offset)
    arr = arr.reshape((count,) + tuple(dims[1:])).astype(np.float64)
    if type_code == 0x08:
        arr /= 255.0
    return arr


def read_idx_labels(path, limit=None) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, (count_all,), offset = _header(data, path, LABELS_MAGIC, 1)
    if magic != LABELS_MAGIC:
        raise IdxFormatError(
            f"{path}: bad label magic 0x{magic:08x} at offset 0 (expected 0x{LABELS_MAGIC:08x})"
        )
    if len(data) < offset + count_all:
        raise IdxFormatError(
            f"{path}: truncated payload, file ends at offset {len(data)}, "
            f"expected {offset + count_all}"
        )
    count = count_all if limit is None else min(count_all, int(limit))
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset).astype(np.int64)


def _count(path) -> int:
    with open(path, "rb") as f:
        return struct.unpack(">I", f.read(8)[4:8])[0]


def load_idx(images_path, labels_path, limit=None, num_classes=10) -> Dataset:
    """Load an IDX image/label pair; byte images are scaled to [0, 1].

    2-D images come back with a leading channel axis, ``(N, 1, rows, cols)``.
    """
    x = read_idx_images(images_path, limit)
    y = read_idx_labels(labels_path, limit)
    n_images, n_labels = _count(images_path), _count(labels_path)
    if n_images != n_labels:
        raise IdxFormatError(
            f"count mismatch at offset 4: {n_images} images in {images_path}, "
            f"{n_labels} labels in {labels_path}"
        )
    if x.ndim == 3:
        x = x[:, None, :, :]
    return Dataset(x, y, num_classes)


def load_mnist(directory, split="train", limit=None) -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    d = Path(directory)
    return load_idx(d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte", limit)


def write_idx(dataset: Dataset, images_path, labels_path, as_bytes=None) -> None:
    """Write ``dataset`` as an IDX pair.

    Features inside [0, 1] are stored as unsigned bytes (``round(255 x)``)
    unless ``as_bytes`` is False; anything else is stored as big-endian f64.
    """
    x = dataset.x
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if as_bytes is None:
        as_bytes = bool(x.min() >= 0 and x.max() <= 1)
    dims = x.shape
    if as_bytes:
        head = struct.pack(">I", (0x08 << 8) | len(dims))
        payload = np.rint(x * 255).astype(">u1").tobytes()
    else:
        head = struct.pack(">I", (0x0E << 8) | len(dims))
        payload = x.astype(">f8").tobytes()
    Path(images_path).write_bytes(head + struct.pack(f">{len(dims)}I", *dims) + payload)
    labels = dataset.y.astype(np.uint8).tobytes()
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(dataset.y)) + labels)


def synth_blobs(n, num_classes, dim, separation, seed=0) -> Dataset:
    """Unit-variance Gaussian classes centred at ``separation * u_c``.

    ``u_c`` is the c-th basis vector when ``num_classes <= dim``, otherwise a
    random unit vector drawn from the seed. Class counts differ by at most one.
    """
    if num_classes < 2 or n < num_classes:
        raise ValueError("need n >= num_classes >= 2")
    if dim < 1:
        raise ValueError("dim must be positive")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    if num_classes <= dim:
        centres = np.eye(num_classes, dim)
    else:
        centres = rng.normal(size=(num_classes, dim))
        centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    y = rng.permutation(np.arange(n) % num_classes)
    x = separation * centres[y] + rng.normal(size=(n, dim))
    return Dataset(x, y, num_classes)
