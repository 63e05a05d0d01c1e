"""Dataset readers: MNIST IDX files and CIFAR-10 binary batches.

Images come back as float64 arrays in [0, 1] with a channel axis,
``(N, 1, 28, 28)`` for MNIST and ``(N, 3, 32, 32)`` for CIFAR-10.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, LabelOutOfRange, TruncatedFile

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.name)


def data_root(default=None):
    """Dataset root from NNFRAG_DATA, falling back to ``default``."""
    root = os.environ.get("NNFRAG_DATA")
    return Path(root) if root else (Path(default) if default else None)


def _find(dirpath, name):
    for cand in (name, name + ".gz"):
        p = Path(dirpath) / cand
        if p.exists():
            return p
    raise FileNotFoundError(f"{name} not found in {dirpath}")


def _read_bytes(path):
    path = Path(path)
    if path.suffix == ".gz":
        import gzip
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx(path, expected_magic):
    """Parse an unsigned-byte IDX file; returns a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: no header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise TruncatedFile(f"{path}: expected {count} bytes of data, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def write_idx(path, array):
    """Inverse of :func:`read_idx` for uint8 arrays of rank 1 or 3."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_mnist(dirpath, split="test"):
    img_name, lab_name = MNIST_FILES[split]
    images = read_idx(_find(dirpath, img_name), IDX_IMAGES)
    labels = read_idx(_find(dirpath, lab_name), IDX_LABELS)
    if len(images) != len(labels):
        raise TruncatedFile(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise LabelOutOfRange(f"label {labels.max()} outside 0..9")
    X = images.astype(np.float64)[:, None] / 255.0
    return Dataset(X, labels.astype(np.int64), "mnist")


def read_cifar_batch(path):
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise LabelOutOfRange(f"label {labels.max()} outside 0..9")
    X = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(X, labels, "cifar10")


def load_cifar10(dirpath, split="test"):
    parts = [read_cifar_batch(_find(dirpath, n)) for n in CIFAR_FILES[split]]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), "cifar10")


def load(name, dirpath, split="test"):
    if name == "mnist":
        return load_mnist(dirpath, split)
    if name == "cifar10":
        return load_cifar10(dirpath, split)
    raise ValueError(f"unknown dataset {name!r}")


def write_mnist_sample(out, n_test_per_class=100, seed=0):
    """Write the 5000-image MNIST sample bundled with mlxtend as IDX files.

    Each class contributes ``n_test_per_class`` images to the test split and
    the rest to the training split; order is shuffled with ``seed``.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.reshape(-1, 28, 28).astype(np.uint8)
    y = y.astype(np.uint8)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test.extend(idx[:n_test_per_class])
        train.extend(idx[n_test_per_class:])
    train, test = rng.permutation(train), rng.permutation(test)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train), ("test", test)):
        img_name, lab_name = MNIST_FILES[split]
        write_idx(out / img_name, X[idx])
        write_idx(out / lab_name, y[idx])
    return out
