"""Dataset container, CIFAR-10 binary and IDX codecs, and a seeded synthetic set."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W]; decoders and the generator give [0, 1]
    labels: np.ndarray  # int64 [N]
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def split(self, fractions=(0.6, 0.2, 0.2), seed=0):
        """Stratified seeded split into ``len(fractions)`` datasets."""
        fractions = np.asarray(fractions, dtype=np.float64)
        if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
            raise ValueError("split fractions must be nonnegative and sum to 1")
        rng = np.random.default_rng(seed)
        parts = [[] for _ in fractions]
        for c in range(self.class_count):
            idx = rng.permutation(np.flatnonzero(self.labels == c))
            bounds = np.round(np.cumsum(fractions) * len(idx)).astype(int)
            for p, (lo, hi) in enumerate(zip(np.r_[0, bounds[:-1]], bounds)):
                parts[p].append(idx[lo:hi])
        return [self.subset(np.sort(np.concatenate(p))) for p in parts]

    def channel_stats(self):
        """Per-channel ``(mean, std)``, each shaped ``[C, 1, 1]``."""
        if len(self) == 0:
            raise ValueError("cannot compute statistics of an empty dataset")
        x = self.images.astype(np.float64)
        mean = x.mean(axis=(0, 2, 3))[:, None, None]
        std = x.std(axis=(0, 2, 3))[:, None, None]
        return mean, np.where(std > 0, std, 1.0)

    def standardized(self, mean, std):
        """Copy with ``(images - mean) / std`` in the original dtype."""
        x = (self.images.astype(np.float64) - mean) / std
        return Dataset(x.astype(self.images.dtype), self.labels, self.class_count)


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches: records of 1 label byte + 3*32*32 channel-planar pixels
# ---------------------------------------------------------------------------

CIFAR_SHAPE = (3, 32, 32)
CIFAR_RECORD = 1 + 3 * 32 * 32


def decode_cifar10_binary(raw: bytes) -> Dataset:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    if len(records) == 0:
        warnings.warn("CIFAR-10 file holds no records", RuntimeWarning, stacklevel=2)
    labels = records[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise FormatError(f"label byte {labels.max()} > 9")
    images = (records[:, 1:].reshape((-1,) + CIFAR_SHAPE) / 255.0).astype(np.float32)
    return Dataset(images, labels, 10)


def load_cifar10_binary(path) -> Dataset:
    return decode_cifar10_binary(Path(path).read_bytes())


def _to_bytes(images):
    return np.rint(np.asarray(images, dtype=np.float64) * 255.0).clip(0, 255).astype(np.uint8)


def encode_cifar10_binary(dataset: Dataset) -> bytes:
    if dataset.images.shape[1:] != CIFAR_SHAPE:
        raise FormatError(f"CIFAR records need images of shape {CIFAR_SHAPE}")
    pixels = _to_bytes(dataset.images).reshape(len(dataset), -1)
    labels = dataset.labels.astype(np.uint8)[:, None]
    return np.concatenate([labels, pixels], axis=1).tobytes()


# ---------------------------------------------------------------------------
# IDX (MNIST): big-endian magic 0x0000 08 ndim, then ndim uint32 sizes, then uint8 data
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _decode_idx(raw: bytes, expected_magic: int):
    if len(raw) < 4:
        raise FormatError("IDX file too short for a header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"IDX payload has {len(raw) - header} bytes, header says {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def decode_idx(image_bytes: bytes, label_bytes: bytes, class_count=None) -> Dataset:
    images = _decode_idx(image_bytes, IDX_IMAGES_MAGIC)
    labels = _decode_idx(label_bytes, IDX_LABELS_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 10
    return Dataset((images[:, None] / 255.0).astype(np.float32), labels, class_count)


def load_idx(path_images, path_labels, class_count=None) -> Dataset:
    return decode_idx(Path(path_images).read_bytes(), Path(path_labels).read_bytes(),
                      class_count)


def encode_idx(dataset: Dataset):
    """Return ``(image_bytes, label_bytes)`` for a single-channel dataset."""
    if dataset.images.shape[1] != 1:
        raise FormatError("IDX images must be single-channel")
    n, _, h, w = dataset.images.shape
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + _to_bytes(dataset.images).tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


# ---------------------------------------------------------------------------
# synthetic patterns
# ---------------------------------------------------------------------------


def _pattern(cls, size, shift_r, shift_c):
    """Class-specific template; ``shift_*`` jitter the pattern position."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    mid = (size - 1) / 2
    r0, c0 = mid + shift_r, mid + shift_c
    width = max(size / 8, 1.0)
    kind = cls % 6
    if kind == 0:  # horizontal bar
        img = np.abs(r - r0) <= width
    elif kind == 1:  # vertical bar
        img = np.abs(c - c0) <= width
    elif kind == 2:  # diagonal bar
        img = np.abs((r - r0) - (c - c0)) <= 1.5 * width
    elif kind == 3:  # blob
        return np.exp(-((r - r0) ** 2 + (c - c0) ** 2) / (2 * (size / 6) ** 2))
    elif kind == 4:  # ring
        rad = np.hypot(r - r0, c - c0)
        img = np.abs(rad - size / 3) <= width
    else:  # anti-diagonal bar
        img = np.abs((r - r0) + (c - c0)) <= 1.5 * width
    img = img.astype(np.float64)
    if cls >= 6:  # further classes: inverted variants
        img = 1.0 - img
    return img


def gen_synthetic(class_count=5, n_per_class=100, size=16, seed=0, noise=0.15, jitter=2,
                  channels=1) -> Dataset:
    """Seeded images of per-class patterns (bars, blob, ring) with jitter and noise."""
    if class_count < 1 or n_per_class < 0 or size < 4:
        raise ValueError("need class_count >= 1, n_per_class >= 0, size >= 4")
    rng = np.random.default_rng(seed)
    n = class_count * n_per_class
    labels = np.repeat(np.arange(class_count), n_per_class)
    images = np.empty((n, channels, size, size), dtype=np.float64)
    for i, cls in enumerate(labels):
        if jitter:
            shift_r, shift_c = rng.integers(-jitter, jitter + 1, size=2)
        else:
            shift_r = shift_c = 0
        base = _pattern(int(cls), size, shift_r, shift_c)
        for ch in range(channels):
            images[i, ch] = base
    if noise > 0:
        images += rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, class_count)
