"""Dataset sources: MNIST IDX files and seeded Gaussian class blobs."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

DATA_DIR_ENV = "SALEAK_DATA_DIR"
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledData:
    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""

    def __len__(self):
        return len(self.labels)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(blob: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{what}: truncated header, file has {len(blob)} bytes, need {header} (offset 0)")
    found = struct.unpack_from(">I", blob, 0)[0]
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims))
    if len(blob) - header < size:
        raise FormatError(f"{what}: truncated data at offset {len(blob)}, expected {header + size} bytes")
    if len(blob) - header > size:
        raise FormatError(f"{what}: {len(blob) - header - size} trailing bytes at offset {header + size}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> LabeledData:
    """Read an MNIST image/label file pair (optionally gzipped).

    Images come back as float64 in [0, 1] with shape ``(N, 1, 28, 28)``.
    """
    images = _parse_idx(_read(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch at offset 4: {images.shape[0]} images, {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise FormatError(f"label value {labels.max()} outside 0-9")
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return LabeledData(x, labels.astype(np.int64), 10, "mnist")


def find_mnist(data_dir=None, split: str = "train"):
    """Locate ``<split>-images-idx3-ubyte`` / ``<split>-labels-idx1-ubyte`` (plain or .gz).

    Looks in ``data_dir``, else ``$SALEAK_DATA_DIR``. Returns ``None`` when absent.
    """
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        return None
    root = Path(data_dir)
    prefix = "t10k" if split == "test" else "train"
    for suffix in ("", ".gz"):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    return None


def gen_synthetic(n_classes: int, dim: int, seed: int, n_samples: int = 20000, shape=None,
                  blob_std: float = 1.0, separation: float = 4.0) -> LabeledData:
    """Gaussian class blobs; every pair of class means is at least ``separation * blob_std`` apart."""
    if n_classes < 2 or dim < 1:
        raise ConfigError("need n_classes >= 2 and dim >= 1")
    if shape is not None and int(np.prod(shape)) != dim:
        raise ConfigError(f"shape {shape} does not hold {dim} features")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, dim))
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(-1))
    closest = dist[~np.eye(n_classes, dtype=bool)].min()
    means *= 1.05 * separation * blob_std / closest
    labels = rng.integers(0, n_classes, size=n_samples)
    samples = means[labels] + blob_std * rng.standard_normal((n_samples, dim))
    if shape is not None:
        samples = samples.reshape((n_samples,) + tuple(shape))
    return LabeledData(samples, labels.astype(np.int64), n_classes, "synthetic")


def class_means(data: LabeledData) -> np.ndarray:
    flat = data.samples.reshape(len(data), -1)
    return np.stack([flat[data.labels == c].mean(axis=0) for c in range(data.n_classes)])
