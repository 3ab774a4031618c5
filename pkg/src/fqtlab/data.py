"""Synthetic blobs, IDX files and seeded mini-batching."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # one-hot (N, C)
    name: str
    seed: int | None = None

    def __post_init__(self):
        f, y = self.features, self.labels
        if f.ndim != 2 or y.ndim != 2 or f.shape[0] != y.shape[0]:
            raise ValueError(f"features {f.shape} and labels {y.shape} do not line up")
        if not np.all(np.isfinite(f)):
            raise ValueError("features contain non-finite values")
        if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
            raise ValueError("labels must be one-hot rows")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def class_ids(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, idx, name=None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], name or self.name, self.seed)

    def split(self, val_fraction: float, seed: int = 0):
        """Seeded (train, val) split."""
        if not 0.0 < val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = max(1, int(round(val_fraction * len(self))))
        return self.subset(np.sort(perm[n_val:]), self.name + "-train"), self.subset(np.sort(perm[:n_val]), self.name + "-val")

    def batches(self, batch_size: int, epoch: int, seed: int):
        """Sequential mini-batches over a shuffle seeded by (seed, epoch).  The last short batch is kept."""
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        perm = np.random.default_rng([seed, epoch]).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = perm[start : start + batch_size]
            yield self.features[idx], self.labels[idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j}" for j in range(self.dims)] + ["label"])
            for row, c in zip(self.features, self.class_ids()):
                w.writerow([repr(float(v)) for v in row] + [int(c)])


def one_hot(ids, n_classes: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    out = np.zeros((ids.shape[0], n_classes))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


def make_blobs(classes: int, dims: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters around centers drawn uniformly from [-1, 1]^dims."""
    if classes < 1 or dims < 1 or per_class < 1:
        raise ValueError("classes, dims and per_class must be positive")
    if spread < 0 or not np.isfinite(spread):
        raise ValueError("spread must be finite and non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1.0, 1.0, (classes, dims))
    ids = np.repeat(np.arange(classes), per_class)
    x = centers[ids] + spread * rng.standard_normal((ids.shape[0], dims))
    return Dataset(x, one_hot(ids, classes), f"blobs-{classes}x{dims}", seed)


def _read_header(buf, path, magic, n_dims):
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise ValueError(f"{path}: truncated header, expected {need} bytes at offset 0, got {len(buf)}")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise ValueError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(">" + "I" * n_dims, buf, 4)


def load_idx(images_path, labels_path, limit: int | None = None, n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair.  Pixels are scaled to [0, 1] and images flattened."""
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    n_img, rows, cols = _read_header(ibuf, images_path, IMAGE_MAGIC, 3)
    (n_lab,) = _read_header(lbuf, labels_path, LABEL_MAGIC, 1)
    if n_img != n_lab:
        raise ValueError(f"{images_path} has {n_img} images but {labels_path} has {n_lab} labels")
    n = n_img if limit is None else min(n_img, max(int(limit), 0))
    size = rows * cols
    if len(ibuf) < 16 + n * size:
        raise ValueError(f"{images_path}: truncated at offset {len(ibuf)}, need {16 + n * size} bytes")
    if len(lbuf) < 8 + n:
        raise ValueError(f"{labels_path}: truncated at offset {len(lbuf)}, need {8 + n} bytes")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * size, offset=16).reshape(n, size)
    ids = np.frombuffer(lbuf, dtype=np.uint8, count=n, offset=8)
    bad = np.nonzero(ids >= n_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{labels_path}: label {int(ids[i])} at offset {8 + i} out of range [0, {n_classes})")
    return Dataset(pixels.astype(np.float64) / 255.0, one_hot(ids, n_classes), "idx")


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())
