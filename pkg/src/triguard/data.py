"""Dataset containers and loaders for IDX (MNIST, FashionMNIST) and CIFAR-10 batches."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_BATCH_RECORDS = 10000

# default PGD radius per dataset
DEFAULT_EPS = {"mnist": 0.1, "fashion_mnist": 0.1, "cifar10": 0.3, "toy": 0.1}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    name: str = "unknown"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ContractError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, indices):
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.name, self.num_classes)

    def subset(self, n, seed=0):
        """Fixed pseudo-random subset of size min(n, N), kept in index order."""
        if n is None or n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return self.take(idx)


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(blob, magic, path):
    if len(blob) < 8:
        raise FormatError(f"{path}: file shorter than IDX header", len(blob))
    (found,) = struct.unpack_from(">I", blob, 0)
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", len(blob))
    dims = struct.unpack_from(">" + "I" * ndim, blob, 4)
    expected = header + int(np.prod(dims))
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob) - header} bytes, header implies "
                          f"{expected - header}", min(len(blob), expected))
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train", name="mnist", dtype=np.float32):
    """Read an IDX image/label file pair (optionally gzipped); pixels are scaled by 1/255."""
    pixels = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(pixels) != len(labels):
        raise FormatError(f"{len(pixels)} images but {len(labels)} labels in {labels_path}", 4)
    images = (pixels.astype(dtype) / dtype(255.0))[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), split, name, 10)


def load_cifar10(batch_paths, split="train", records_per_batch=None, dtype=np.float32):
    """Read CIFAR-10 binary batches (label byte + 3072 channel-major pixel bytes per record).

    Each file must hold a whole number of records; pass ``records_per_batch=10000``
    to insist on standard-size batches.
    """
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    images, labels = [], []
    for path in batch_paths:
        blob = _read(path)
        if len(blob) == 0 or len(blob) % CIFAR_RECORD:
            raise FormatError(f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD}",
                              len(blob) - len(blob) % CIFAR_RECORD)
        n = len(blob) // CIFAR_RECORD
        if records_per_batch is not None and n != records_per_batch:
            raise FormatError(f"{path}: {n} records, expected {records_per_batch}", len(blob))
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] > 9)
        if bad.size:
            raise FormatError(f"{path}: label {rec[bad[0], 0]} out of range 0-9",
                              int(bad[0]) * CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(n, 3, 32, 32))
    pixels = np.concatenate(images)
    return Dataset(pixels.astype(dtype) / dtype(255.0), np.concatenate(labels), split,
                   "cifar10", 10)


def make_toy_dataset(n, num_classes=3, shape=(1, 8, 8), noise=0.15, seed=0, split="train"):
    """Noisy copies of one fixed random prototype per class, clipped to [0, 1]."""
    proto_rng = np.random.default_rng(1234)
    protos = (proto_rng.random((num_classes,) + tuple(shape)) > 0.6).astype(np.float64) * 0.8
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    images = np.clip(protos[labels] + noise * rng.standard_normal((n,) + tuple(shape)), 0, 1)
    return Dataset(images, labels.astype(np.int64), split, "toy", num_classes)


def write_idx(path, array, magic):
    """Write a uint8 array in IDX layout (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())
