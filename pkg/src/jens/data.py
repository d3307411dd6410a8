"""Datasets: IDX loading, bootstrap resampling, batching and synthetic blobs."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from ._io import atomic_write_bytes

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_DIR_ENV = "JENS_DATA_DIR"


class DataError(ValueError):
    """Base class for dataset problems."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    class_count: int = 10
    image_hw: tuple[int, int] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise DataError(f"images must be (N, D), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelRangeError(f"labels must lie in 0..{self.class_count - 1}")
        if self.image_hw is None:
            side = int(round(np.sqrt(self.dim)))
            self.image_hw = (side, side) if side * side == self.dim else (1, self.dim)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def take(self, idx, name: str | None = None) -> Dataset:
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], name or self.name, self.class_count, self.image_hw)


# ---------------------------------------------------------------- IDX files

def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError("file shorter than the IDX header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IdxMagicError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError("truncated IDX dimension table")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"IDX payload has {len(raw) - header} bytes, expected {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str | None = None, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    images = parse_idx(_read_bytes(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= class_count:
        raise LabelRangeError(f"label {labels.max()} outside 0..{class_count - 1}")
    n, rows, cols = images.shape
    return Dataset(
        images.reshape(n, rows * cols) / 255.0,
        labels.astype(np.int64),
        name or Path(images_path).name,
        class_count,
        (rows, cols),
    )


def idx_bytes(ds: Dataset) -> tuple[bytes, bytes]:
    """Serialize back to IDX (images, labels)."""
    rows, cols = ds.image_hw
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    images = struct.pack(">IIII", IMAGE_MAGIC, len(ds), rows, cols) + pixels.tobytes()
    labels = struct.pack(">II", LABEL_MAGIC, len(ds)) + ds.labels.astype(np.uint8).tobytes()
    return images, labels


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    images, labels = idx_bytes(ds)
    for path, raw in ((images_path, images), (labels_path, labels)):
        if Path(path).suffix == ".gz":
            raw = gzip.compress(raw, mtime=0)
        atomic_write_bytes(path, raw)


_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_named(name: str, split: str, data_dir=None) -> Dataset:
    """Load ``mnist`` or ``fashion_mnist`` from ``data_dir/<name>/``.

    ``data_dir`` defaults to ``$JENS_DATA_DIR``; gzip-compressed files are
    picked up when the plain file is absent.
    """
    base = Path(data_dir or os.environ.get(DATA_DIR_ENV, "data")) / name
    found = []
    for stem in _SPLIT_FILES[split]:
        plain = base / stem
        gz = base / f"{stem}.gz"
        if plain.exists():
            found.append(plain)
        elif gz.exists():
            found.append(gz)
        else:
            raise FileNotFoundError(f"missing {plain} (or {gz.name})")
    return load_idx(found[0], found[1], name=f"{name}-{split}")


# ---------------------------------------------------------------- resampling / batching

def bootstrap_resample(ds: Dataset, seed: int) -> Dataset:
    """``N`` draws with replacement."""
    if len(ds) == 0:
        raise EmptyDatasetError("cannot bootstrap an empty dataset")
    idx = np.random.default_rng(seed).integers(0, len(ds), size=len(ds))
    return ds.take(idx, name=f"{ds.name}-boot{seed}")


def subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """A fixed random subset of ``n`` samples (all of them when ``n >= N``)."""
    if n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return ds.take(idx, name=f"{ds.name}-sub{n}")


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def batches(self, n: int, epoch: int = 0) -> Iterator[np.ndarray]:
        order = np.random.default_rng([self.seed, epoch]).permutation(n)
        stop = n - n % self.batch_size if self.drop_last else n
        for start in range(0, stop, self.batch_size):
            yield order[start:start + self.batch_size]

    def steps_per_epoch(self, n: int) -> int:
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)


# ---------------------------------------------------------------- synthetic data

def synthetic_blobs(
    n: int,
    d: int,
    c: int,
    seed: int = 0,
    separation: float = 0.5,
    spread: float = 0.1,
    name: str = "synthetic",
) -> Dataset:
    """Gaussian class clusters in ``[0, 1]^d``.

    Class ``k`` is centred at ``0.5 + separation * (b_k - 1/c)`` where ``b_k``
    indicates the ``k``-th of ``c`` equal coordinate blocks, so the centres
    form a regular simplex. Samples get isotropic noise of std ``spread`` and
    are clipped to ``[0, 1]``. Labels are balanced.
    """
    if c < 2:
        raise ValueError("need at least two classes")
    if d < c:
        raise ValueError("need d >= c so every class owns a coordinate block")
    rng = np.random.default_rng(seed)
    blocks = np.zeros((c, d))
    bounds = np.linspace(0, d, c + 1).astype(int)
    for k in range(c):
        blocks[k, bounds[k]:bounds[k + 1]] = 1.0
    centres = 0.5 + separation * (blocks - 1.0 / c)
    labels = rng.permutation(np.arange(n) % c)
    images = centres[labels] + spread * rng.standard_normal((n, d))
    return Dataset(np.clip(images, 0.0, 1.0), labels, name, c)
