"""Dataset ingestion, synthesis, batching, and Gaussian augmentation.

Images live in [0, 1] internally; the CLI converts [0, 255]-unit radii at
the boundary.  The IDX reader accepts plain or gzip files (magic sniffing).
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def subset(self, indices):
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices])


def _read_bytes(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def load_idx(images_path, labels_path):
    """Parse an MNIST-style IDX image/label file pair."""
    raw = _read_bytes(images_path)
    if len(raw) < 16:
        raise IdxFormatError(f"truncated IDX header in {images_path}")
    magic, n, h, w = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"wrong magic 0x{magic:08x} in {images_path} "
            f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
    if len(raw) != 16 + n * h * w:
        raise IdxFormatError(
            f"truncated IDX payload in {images_path}: "
            f"expected {n * h * w} pixel bytes, found {len(raw) - 16}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    raw = _read_bytes(labels_path)
    if len(raw) < 8:
        raise IdxFormatError(f"truncated IDX header in {labels_path}")
    magic, n_labels = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(
            f"wrong magic 0x{magic:08x} in {labels_path} "
            f"(expected 0x{IDX_LABELS_MAGIC:08x})")
    if len(raw) != 8 + n_labels:
        raise IdxFormatError(f"truncated IDX payload in {labels_path}")
    if n_labels != n:
        raise IdxFormatError(
            f"count mismatch: {n} images in {images_path} "
            f"but {n_labels} labels in {labels_path}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset((images / np.float32(255.0)).astype(np.float32), labels)


def write_idx(dataset, images_path, labels_path):
    """Inverse of :func:`load_idx` for round-trip tests and fixtures."""
    images = np.round(dataset.images * 255.0).astype(np.uint8)
    n, c, h, w = images.shape
    if c != 1:
        raise IdxFormatError("IDX writer supports single-channel images only")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _smooth_template(rng, side, cells=7):
    """Low-resolution random field upsampled to a smooth [-1, 1] pattern."""
    coarse = rng.normal(size=(cells, cells))
    xs = np.linspace(0, cells - 1, side)
    i0 = np.clip(xs.astype(int), 0, cells - 2)
    frac = xs - i0
    rows = (coarse[i0, :] * (1 - frac)[:, None] + coarse[i0 + 1, :] * frac[:, None])
    cols = (rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :])
    return (cols / np.abs(cols).max()).astype(np.float32)


def synth_dataset(classes=10, per_class=100, side=28, seed=0,
                  stroke=0.95, pixel_noise=0.05, jitter=2):
    """Near-binary glyph images: dark background, one bright shape per class.

    Each class gets a fixed random glyph (a thresholded smooth field
    covering ~a quarter of the frame); examples jitter it spatially and add
    pixel noise.  The high stroke/background contrast leaves a usable
    margin even under large L-infinity perturbations.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    glyphs = []
    for _ in range(classes):
        field = _smooth_template(rng, side)
        mask = field > np.quantile(field, 0.75)
        glyphs.append(mask.astype(np.float32))
    n = classes * per_class
    images = np.empty((n, 1, side, side), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for c in range(classes):
        for k in range(per_class):
            idx = c * per_class + k
            dx, dy = rng.integers(-jitter, jitter + 1, size=2)
            img = stroke * np.roll(glyphs[c], (dy, dx), axis=(0, 1)) \
                + pixel_noise * rng.normal(size=(side, side)).astype(np.float32)
            images[idx, 0] = np.clip(img, 0.0, 1.0)
            labels[idx] = c
    order = rng.permutation(n)
    return Dataset(images[order], labels[order])


def gaussian_augment(batch, sigma, rng):
    """Add N(0, sigma^2) pixel noise, then clip back into [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return batch
    noise = rng.normal(0.0, sigma, size=batch.shape).astype(batch.dtype)
    return np.clip(batch + noise, 0.0, 1.0)


def batches(dataset, batch_size, seed):
    """Seeded shuffle split into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def eval_slice(dataset, count, seed):
    """The seeded random evaluation subset shared by all attacks in a report."""
    count = min(count, len(dataset))
    idx = np.random.default_rng(seed).choice(len(dataset), size=count,
                                             replace=False)
    return dataset.subset(idx)
