"""Datasets: MNIST IDX files, complement coding and synthetic clusters."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import HypercolumnGeometry

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Base class for unreadable IDX files."""


class WrongMagicError(IdxFormatError):
    pass


class DimensionMismatchError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


@dataclass(eq=False)
class Dataset:
    """Samples in rows, features in [0, 1], optional integer labels.

    ``encoding`` is ``"raw"`` (one feature per pixel) or ``"complement"``
    (each pixel ``x`` stored as the adjacent pair ``x, 1 - x``).
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    encoding: str = "raw"

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D (samples x features) array")
        if self.encoding not in ("raw", "complement"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("need exactly one label per sample")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    @property
    def geometry(self) -> HypercolumnGeometry:
        """Input layer geometry: pixel hypercolumns of 2 units, or single-unit columns."""
        if self.encoding == "complement":
            return HypercolumnGeometry(self.n_features // 2, 2)
        return HypercolumnGeometry(self.n_features, 1)

    def take(self, n: int) -> "Dataset":
        """The first ``n`` samples."""
        labels = None if self.labels is None else self.labels[:n]
        return Dataset(self.features[:n], labels, self.encoding)


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        gz = f.read(2) == b"\x1f\x8b"
    return gzip.open(path, "rb") if gz else open(path, "rb")


def _read_idx(path, magic_expected, what):
    with _open(path) as f:
        data = f.read()
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: {what} file too short for an IDX header")
    magic, count = struct.unpack_from(">II", data, 0)
    if magic != magic_expected:
        raise WrongMagicError(f"{path}: wrong magic 0x{magic:08x} for {what} (want 0x{magic_expected:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFileError(f"{path}: {what} header truncated")
    dims = (count,) + struct.unpack_from(f">{ndim - 1}I", data, 8)
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) < header + n:
        raise TruncatedFileError(f"{path}: expected {n} bytes of {what}, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read an IDX image file (and optional label file), gzip or plain.

    Pixels are scaled by 1/255 and flattened; the result is raw-encoded.
    """
    images = _read_idx(images_path, IMAGES_MAGIC, "images")
    features = images.reshape(images.shape[0], -1).astype(np.float32) / np.float32(255.0)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, LABELS_MAGIC, "labels")
        if labels.shape[0] != images.shape[0]:
            raise DimensionMismatchError(
                f"{images.shape[0]} images but {labels.shape[0]} labels"
            )
    return Dataset(features, labels, "raw")


def find_mnist_file(directory, stem) -> Path:
    directory = Path(directory)
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def default_mnist_dir() -> Path:
    """``$BCPNN_MNIST_DIR`` or the ``data/mnist`` folder next to the source tree."""
    env = os.environ.get("BCPNN_MNIST_DIR")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data" / "mnist"


def load_mnist(directory=None, split: str = "train") -> Dataset:
    directory = default_mnist_dir() if directory is None else directory
    img, lab = MNIST_FILES[split]
    return load_idx(find_mnist_file(directory, img), find_mnist_file(directory, lab))


def encode_complement(dataset: Dataset) -> Dataset:
    """Replace each feature ``x`` by the adjacent pair ``(x, 1 - x)``."""
    if dataset.encoding != "raw":
        raise ValueError("dataset is already complement-encoded")
    x = dataset.features
    out = np.empty((x.shape[0], 2 * x.shape[1]), dtype=x.dtype)
    out[:, 0::2] = x
    out[:, 1::2] = 1 - x
    return Dataset(out, dataset.labels, "complement")


def make_synthetic_clusters(
    seed,
    n_clusters: int,
    n_samples: int,
    n_features: int,
    spread: float,
    dtype=np.float64,
    return_centroids: bool = False,
):
    """Labelled samples scattered around fixed random centroids in [0, 1].

    Centroids are uniform in the unit cube; each sample is its centroid plus
    Gaussian noise of standard deviation ``spread``, clipped to [0, 1].
    Classes are balanced and the sample order is shuffled.
    """
    if min(n_clusters, n_samples, n_features) < 1 or spread < 0:
        raise ValueError("cluster parameters must be positive")
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0.0, 1.0, size=(n_clusters, n_features))
    labels = rng.permutation(np.arange(n_samples) % n_clusters)
    noise = rng.standard_normal((n_samples, n_features)) * spread
    x = np.clip(centroids[labels] + noise, 0.0, 1.0).astype(dtype)
    ds = Dataset(x, labels, "raw")
    return (ds, centroids) if return_centroids else ds
