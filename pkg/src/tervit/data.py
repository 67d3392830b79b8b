"""Datasets: seeded synthetic blob images and IDX files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tervit.exceptions import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1] for IDX data
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) == 0:
            raise ConfigError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)


def synthetic_blobs(num_samples: int = 200, num_classes: int = 2, image_size: int = 16,
                    channels: int = 1, seed: int = 0, noise: float = 0.5,
                    blob_sigma: float = 2.0, task_seed: int = 0) -> Dataset:
    """Class-conditional Gaussian-blob images.

    Each class owns a blob centre; a sample is its class blob with a random
    amplitude and position jitter plus i.i.d. Gaussian pixel noise. Centres
    depend only on ``task_seed``, so different ``seed`` values draw fresh
    samples of the same task.
    """
    if num_samples <= 0 or num_classes < 2:
        raise ConfigError("need num_samples > 0 and num_classes >= 2")
    margin = image_size / 4
    centres = np.random.default_rng(task_seed).uniform(margin, image_size - margin, size=(num_classes, 2))
    rng = np.random.default_rng(seed)
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    jitter = rng.normal(0.0, 1.0, size=(num_samples, 2))
    amp = rng.uniform(0.75, 1.25, size=num_samples)
    cy = centres[labels, 0] + jitter[:, 0]
    cx = centres[labels, 1] + jitter[:, 1]
    blobs = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
                   / (2 * blob_sigma**2)) * amp[:, None, None]
    imgs = blobs[:, None] + noise * rng.standard_normal((num_samples, channels, image_size,
                                                           image_size))
    return Dataset(imgs.astype(np.float32), labels.astype(np.int64), num_classes)


# -- IDX ------------------------------------------------------------------------


def _read_header(buf: bytes, path: Path, expected_magic: int) -> tuple[list[int], int]:
    if len(buf) < 4:
        raise FormatError(f"{path}: unexpected end of file reading magic")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"{path}: unexpected end of file reading dimensions")
    dims = list(struct.unpack(f">{ndim}I", buf[4:end]))
    return dims, end


def read_idx(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    dims, offset = _read_header(buf, path, expected_magic)
    count = int(np.prod(dims))
    if dims[0] == 0:
        raise FormatError(f"{path}: file holds zero items")
    if len(buf) - offset < count:
        raise FormatError(f"{path}: unexpected end of file: need {count} bytes of data, "
                          f"found {len(buf) - offset}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images vs "
                          f"{labels.shape[0]} labels")
    imgs = images.astype(np.float32)[:, None] / 255.0
    labels = labels.astype(np.int64)
    return Dataset(imgs, labels, num_classes or int(labels.max()) + 1)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (used for fixtures and export)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())
