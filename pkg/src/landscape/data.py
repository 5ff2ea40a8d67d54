"""Datasets: Gaussian blobs, CIFAR-10 binary batches, batching and evaluation."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError, NumericOverflowError
from .seeding import DATA, stream

CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_CLASSES = 10
LMDS_MAGIC = b"LMDS"
LMDS_VERSION = 1


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1 or len(self.inputs) != len(self.labels):
            raise ValueError("dataset needs matching, non-empty inputs and labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite features")

    def __len__(self):
        return len(self.labels)

    def batch(self, index) -> "Batch":
        return Batch(np.asarray(index), self.inputs[index], self.labels[index])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.inputs[index], self.labels[index], self.num_classes, dict(self.meta))

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


@dataclass
class Batch:
    index: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError("empty batch")

    def __len__(self):
        return len(self.labels)


def iter_batches(dataset: Dataset, batch_size: int, rng=None):
    """Yield batches covering every index once; shuffled when ``rng`` is given."""
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield dataset.batch(order[start:start + batch_size])


def gen_blobs(num_classes: int = 10, per_class: int = 500, dim: int = 64, spread: float = 1.0,
              seed: int = 0) -> Dataset:
    """Gaussian clusters around random unit-norm centers.

    Each sample is ``center + spread * N(0, I)``; samples are interleaved by
    class so any prefix of the dataset is roughly balanced.
    """
    if num_classes < 2 or per_class < 1 or dim < 1 or spread < 0:
        raise ValueError("invalid blob parameters")
    rng = stream(DATA, seed)
    centers = rng.normal(size=(num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.tile(np.arange(num_classes), per_class)
    inputs = centers[labels] + spread * rng.normal(size=(labels.size, dim))
    meta = {"source": "blobs", "num_classes": num_classes, "per_class": per_class,
            "dim": dim, "spread": spread, "seed": seed}
    return Dataset(inputs, labels, num_classes, meta)


# ---------------------------------------------------------------- CIFAR-10

def parse_cifar10_bytes(raw: bytes, name: str = "<bytes>"):
    """Split a CIFAR-10 binary batch into ``(labels uint8, pixels uint8 (N,3,32,32))``."""
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(f"{name}: truncated record at byte offset {whole * CIFAR_RECORD} "
                          f"(file length {len(raw)} is not a multiple of {CIFAR_RECORD})")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].copy()
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{name}: label {labels[i]} >= 10 in record {i} "
                          f"(byte offset {i * CIFAR_RECORD})")
    return labels, recs[:, 1:].reshape(-1, 3, 32, 32).copy()


def write_cifar10_bytes(labels, pixels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def read_cifar10(paths, per_class: int | None = None) -> Dataset:
    """Read CIFAR-10 binary batch files.

    Pixels are scaled to [0, 1] and standardized per channel with the
    statistics of the loaded records. ``per_class`` keeps the first K
    records of each class.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    all_labels, all_pixels = [], []
    for p in paths:
        labels, pixels = parse_cifar10_bytes(Path(p).read_bytes(), str(p))
        all_labels.append(labels)
        all_pixels.append(pixels)
    labels = np.concatenate(all_labels)
    pixels = np.concatenate(all_pixels)
    if per_class is not None:
        keep = np.concatenate([np.nonzero(labels == c)[0][:per_class] for c in range(CIFAR_CLASSES)])
        keep.sort()
        labels, pixels = labels[keep], pixels[keep]
    x = pixels.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    meta = {"source": "cifar10", "files": [str(p) for p in paths], "per_class": per_class,
            "channel_mean": mean.tolist(), "channel_std": std.tolist()}
    return Dataset(x, labels, CIFAR_CLASSES, meta)


def cifar10_paths(root=None, train=True):
    root = Path(root or os.environ.get("LM_DATA_DIR", "."))
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
    for sub in ("", "cifar-10-batches-bin"):
        paths = [root / sub / n for n in names]
        if all(p.exists() for p in paths):
            return paths
    raise FileNotFoundError(f"CIFAR-10 binary files not found under {root}")


# ---------------------------------------------------------------- LMDS container

def save_dataset(ds: Dataset, path) -> None:
    """Write the ``LMDS`` container: header, f64 features, u32 labels (little-endian)."""
    shape = ds.inputs.shape
    head = LMDS_MAGIC + struct.pack("<HIB", LMDS_VERSION, ds.num_classes, len(shape))
    head += struct.pack(f"<{len(shape)}Q", *shape)
    body = ds.inputs.astype("<f8").tobytes() + ds.labels.astype("<u4").tobytes()
    _atomic_write(path, head + body)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != LMDS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, num_classes, ndim = struct.unpack_from("<HIB", raw, 4)
    if version != LMDS_VERSION:
        raise FormatError(f"{path}: unsupported LMDS version {version}")
    off = 4 + struct.calcsize("<HIB")
    shape = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    n_feat = int(np.prod(shape))
    need = off + 8 * n_feat + 4 * shape[0]
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    x = np.frombuffer(raw, "<f8", n_feat, off).reshape(shape)
    y = np.frombuffer(raw, "<u4", shape[0], off + 8 * n_feat)
    return Dataset(x.astype(np.float64), y.astype(np.int64), num_classes, {"source": str(path)})


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- evaluation

def eval_loss(model, params, bn, dataset: Dataset, batch_size: int = 1000):
    """Mean cross-entropy and top-1 accuracy over the whole dataset.

    Batch-norm models are evaluated with running statistics. Overflow yields
    ``(inf, nan)`` instead of raising.
    """
    bn_mode = "running" if model.spec.use_bn else None
    theta = ad.Tensor(params.values)
    total, correct = 0.0, 0
    try:
        with ad.no_grad():
            for start in range(0, len(dataset), batch_size):
                x = dataset.inputs[start:start + batch_size]
                y = dataset.labels[start:start + batch_size]
                z = model.logits(theta, x, bn, bn_mode or "batch")
                loss = ad.softmax_cross_entropy(z, y).data
                if not np.isfinite(loss):
                    raise NumericOverflowError("loss")
                total += float(loss) * len(y)
                correct += int((z.data.argmax(axis=1) == y).sum())
    except NumericOverflowError:
        return float("inf"), float("nan")
    return total / len(dataset), correct / len(dataset)
