"""Datasets, condition encoding, the noise prior and minibatching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
# refuse to allocate more than this many elements from a declared header
IDX_MAX_ELEMENTS = 2**31 - 1

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_TRAIN_SIZE = 50_000


class DataError(ValueError):
    """Bad labels or inconsistent dataset contents."""


class IdxError(DataError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


class IdxTrailingDataError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """``samples`` is ``(n, d)`` in [-1, 1]; ``labels`` are ints in ``[0, n_classes)``.

    ``centers`` holds the true class means when they are known (synthetic data).
    """

    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    id: str
    centers: Optional[np.ndarray] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("samples contain non-finite values")
        counts = np.bincount(self.labels, minlength=self.n_classes)
        if np.any(counts == 0):
            raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def class_means(self) -> np.ndarray:
        if self.centers is not None:
            return self.centers
        return np.stack([self.samples[self.labels == c].mean(axis=0) for c in range(self.n_classes)])


# ------------------------------------------------------------------- IDX files


def _read_idx(path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic} (expected {expected_magic})")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header declares {ndim} dims but file ends at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    total = 1
    for d in dims:
        total *= d
    if total > IDX_MAX_ELEMENTS:
        raise IdxDimensionError(f"{path}: declared dims {dims} overflow ({total} elements)")
    payload = raw[header:]
    if len(payload) < total:
        raise IdxTruncatedError(f"{path}: {len(payload)} payload bytes, dims {dims} need {total}")
    if len(payload) > total:
        raise IdxTrailingDataError(f"{path}: {len(payload) - total} bytes after declared payload")
    return dims, payload


def load_idx_images(path) -> np.ndarray:
    """Images as ``(count, rows*cols)`` floats, pixels mapped 0..255 -> -1..1."""
    dims, payload = _read_idx(path, IDX_IMAGE_MAGIC)
    if len(dims) != 3:
        raise IdxDimensionError(f"{path}: image file needs 3 dims, has {len(dims)}")
    count, rows, cols = dims
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    return pixels.astype(np.float64) / 127.5 - 1.0


def load_idx_labels(path) -> np.ndarray:
    dims, payload = _read_idx(path, IDX_LABEL_MAGIC)
    if len(dims) != 1:
        raise IdxDimensionError(f"{path}: label file needs 1 dim, has {len(dims)}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, pixels: np.ndarray) -> None:
    """Write ``(count, rows, cols)`` uint8 pixels as an IDX image file."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">iIII", IDX_IMAGE_MAGIC, *pixels.shape))
        f.write(pixels.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">iI", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def mnist_dir(data_dir=None) -> Path:
    return Path(data_dir or os.environ.get("GANOVA_DATA_DIR", "data"))


def load_mnist(data_dir=None, split: str = "train") -> Dataset:
    """MNIST from decompressed IDX files.

    ``split`` is one of ``"full"`` (all 60,000 training-file images),
    ``"train"`` (the first 50,000), ``"holdout"`` (the last 10,000) or
    ``"test"`` (the 10,000-image t10k files).
    """
    if split not in ("full", "train", "holdout", "test"):
        raise ValueError(f"unknown MNIST split {split!r}")
    root = mnist_dir(data_dir)
    img_name, lbl_name = MNIST_FILES["test" if split == "test" else "train"]
    images = load_idx_images(root / img_name)
    labels = load_idx_labels(root / lbl_name)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if split == "train":
        images, labels = images[:MNIST_TRAIN_SIZE], labels[:MNIST_TRAIN_SIZE]
    elif split == "holdout":
        images, labels = images[MNIST_TRAIN_SIZE:], labels[MNIST_TRAIN_SIZE:]
    return Dataset(images, labels, 10, "mnist")


# ------------------------------------------------------------ synthetic data


def mixture_centers(n_classes: int, radius: float = 0.7) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def mixture_dataset(n_classes: int, per_class: int, sigma: float, rng: np.random.Generator,
                    radius: float = 0.7) -> Dataset:
    """Isotropic 2-D Gaussians on a circle, one per class, clamped to [-1, 1]."""
    if n_classes < 2 or per_class < 1 or sigma <= 0:
        raise ValueError("mixture needs n_classes >= 2, per_class >= 1 and sigma > 0")
    centers = mixture_centers(n_classes, radius)
    labels = np.repeat(np.arange(n_classes), per_class)
    samples = centers[labels] + sigma * rng.standard_normal((labels.size, 2))
    return Dataset(np.clip(samples, -1.0, 1.0), labels, n_classes, "mixture", centers)


# ------------------------------------------------------------ conditioning


def one_hot(labels, n_classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    return Tensor(np.eye(n_classes)[labels])


@dataclass(frozen=True)
class NoisePrior:
    dim: int = 100
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"noise dimension must be >= 1, got {self.dim}")


def sample_noise(prior: NoisePrior, m: int, rng: np.random.Generator) -> Tensor:
    if m < 1:
        raise ValueError(f"need at least one noise sample, got {m}")
    return Tensor(rng.uniform(prior.low, prior.high, size=(m, prior.dim)))


def sample_conditions(ds: Dataset, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``m`` labels from the dataset's empirical label distribution."""
    return ds.labels[rng.integers(0, len(ds), size=m)]


# ---------------------------------------------------------------- batching


@dataclass
class ConditionedBatch:
    samples: Tensor
    labels: np.ndarray

    def __post_init__(self):
        if self.samples.shape[0] != self.labels.shape[0]:
            raise DataError("batch samples and labels disagree in length")


class BatchIterator:
    """Endless stream of fixed-size batches, shuffled without replacement
    each epoch.  The short tail of an epoch is dropped.

    ``perm`` and ``pos`` are the whole resumable state; together with the
    generator state they reproduce the stream exactly.
    """

    def __init__(self, ds: Dataset, m: int, rng: np.random.Generator,
                 perm: Optional[np.ndarray] = None, pos: int = 0):
        if m < 1 or m > len(ds):
            raise ValueError(f"batch size {m} must lie in [1, {len(ds)}]")
        self.ds, self.m, self.rng = ds, m, rng
        self.perm = perm
        self.pos = pos

    @property
    def batches_per_epoch(self) -> int:
        return len(self.ds) // self.m

    def __iter__(self) -> Iterator[ConditionedBatch]:
        return self

    def __next__(self) -> ConditionedBatch:
        if self.perm is None or self.pos + self.m > len(self.perm):
            self.perm = self.rng.permutation(len(self.ds))
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.m]
        self.pos += self.m
        return ConditionedBatch(Tensor(self.ds.samples[idx]), self.ds.labels[idx])

    def epoch(self) -> Iterator[ConditionedBatch]:
        """Exactly one fresh epoch's worth of batches."""
        self.perm = None
        for _ in range(self.batches_per_epoch):
            yield next(self)


def batch_iter(ds: Dataset, m: int, rng: np.random.Generator) -> BatchIterator:
    return BatchIterator(ds, m, rng)


def iterations_per_epoch(n: int, m: int, k: int = 1) -> int:
    """Outer iterations that consume one epoch of real batches (``k`` per iteration)."""
    return max(1, (n // m) // k)
