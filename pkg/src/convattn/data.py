"""Dataset loading and augmentation.

CIFAR binaries use fixed-width records: 1 label byte (CIFAR-10) or 2 label
bytes, coarse then fine (CIFAR-100), followed by 3072 pixel bytes stored as
three 1024-byte row-major planes in R, G, B order. Images decode to float32
RGB in [0, 1], shaped [n, 32, 32, 3].

A synthetic dataset of randomly translated class patterns is included for
data-free pipeline checks; it shares the Dataset interface and is clearly
not CIFAR.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "load_cifar",
    "stratified_indices",
    "make_synthetic",
    "hflip",
    "pad_crop",
    "augment",
    "augment_batch",
    "NORM_STATS",
]

IMAGE_BYTES = 3072
CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
# records in each individual file of the split
RECORDS_PER_FILE = {
    ("cifar10", "train"): 10000,
    ("cifar10", "test"): 10000,
    ("cifar100", "train"): 50000,
    ("cifar100", "test"): 10000,
}

# channel means/stds used when input normalization is enabled
NORM_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "synthetic": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}


class DataError(RuntimeError):
    """Missing, truncated, or malformed dataset files."""


@dataclass
class Dataset:
    images: np.ndarray  # [n, h, w, c] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


def _decode_records(raw: np.ndarray, label_bytes: int) -> tuple[np.ndarray, np.ndarray]:
    rec = label_bytes + IMAGE_BYTES
    records = raw.reshape(-1, rec)
    labels = records[:, label_bytes - 1].astype(np.int64)  # fine label is the last label byte
    pixels = records[:, label_bytes:].reshape(-1, 3, 32, 32)
    images = (pixels.transpose(0, 2, 3, 1).astype(np.float32)) / 255.0
    return images, labels


def load_cifar(path: str, variant: str = "cifar10", split: str = "train",
               fraction: float = 1.0, seed: int = 0) -> Dataset:
    """Load CIFAR binaries from directory ``path``.

    ``fraction`` < 1 selects a stratified per-class random subset: each class
    contributes floor(count * fraction) examples drawn from a seeded
    permutation, remainder dropped, final index list sorted.
    """
    key = (variant, split)
    if key not in CIFAR_FILES:
        raise DataError(f"unknown dataset/split: {variant}/{split}")
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    label_bytes = 1 if variant == "cifar10" else 2
    rec = label_bytes + IMAGE_BYTES
    all_images, all_labels = [], []
    for fname in CIFAR_FILES[key]:
        fpath = os.path.join(path, fname)
        if not os.path.exists(fpath):
            raise DataError(f"dataset file not found: {fpath}")
        size = os.path.getsize(fpath)
        if size % rec != 0:
            raise DataError(f"{fpath}: size {size} is not a multiple of the {rec}-byte record")
        expected = RECORDS_PER_FILE[key] * rec
        if size != expected:
            raise DataError(f"{fpath}: expected {expected} bytes, found {size}")
        raw = np.fromfile(fpath, dtype=np.uint8)
        images, labels = _decode_records(raw, label_bytes)
        all_images.append(images)
        all_labels.append(labels)
    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    ds = Dataset(images, labels, 10 if variant == "cifar10" else 100)
    if fraction < 1.0:
        ds = ds.subset(stratified_indices(labels, fraction, seed))
    return ds


def stratified_indices(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Equal per-class counts of floor(class_count * fraction), seed-stable."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDA7A)))
    picked = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        take = int(len(idx) * fraction)
        picked.append(rng.permutation(idx)[:take])
    return np.sort(np.concatenate(picked))


def make_synthetic(num_classes: int = 10, n_per_class: int = 200, image_hw: tuple[int, int] = (32, 32),
                   channels: int = 3, seed: int = 0, split: str = "train",
                   shift: int = 6, noise: float = 0.15) -> Dataset:
    """Randomly translated smooth class patterns plus pixel noise.

    Class identity is carried by a spatial pattern that appears at a random
    cyclic shift in every sample, so locality/translation-equivariant priors
    genuinely help. The patterns depend only on ``seed``; ``split`` selects
    an independent sample stream over the same classes. Not a CIFAR
    substitute; used for data-free checks.
    """
    h, w = image_hw
    pattern_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5F17)))
    sample_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A3B, 1 if split == "test" else 0)))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    patterns = []
    for _ in range(num_classes):
        pat = np.zeros((h, w, channels), dtype=np.float64)
        for _ in range(4):  # a few random low-frequency plane waves per class
            fy, fx = pattern_rng.integers(1, 4, size=2)
            phase = pattern_rng.uniform(0, 2 * np.pi)
            amp = pattern_rng.uniform(0.5, 1.0)
            wave = amp * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
            pat += wave[:, :, None] * pattern_rng.uniform(0.3, 1.0, size=channels)
        patterns.append(pat)
    images = np.empty((num_classes * n_per_class, h, w, channels), dtype=np.float32)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    i = 0
    for cls, pat in enumerate(patterns):
        for _ in range(n_per_class):
            dy, dx = sample_rng.integers(-shift, shift + 1, size=2)
            img = np.roll(np.roll(pat, dy, axis=0), dx, axis=1)
            img = img + sample_rng.normal(0, noise, size=img.shape)
            images[i] = np.clip(0.5 + 0.2 * img, 0.0, 1.0)
            labels[i] = cls
            i += 1
    order = sample_rng.permutation(len(labels))
    return Dataset(images[order], labels[order], num_classes)


# --------------------------------------------------------------------------
# Augmentation


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :].copy()


def pad_crop(image: np.ndarray, dy: int, dx: int, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` then crop at offset (dy, dx); (pad, pad) restores."""
    h, w, _ = image.shape
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    return padded[dy : dy + h, dx : dx + w, :].copy()


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Random crop from zero padding plus horizontal flip, seeded by ``rng``."""
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = pad_crop(image, int(dy), int(dx), pad=pad)
    if flip and rng.random() < 0.5:
        out = hflip(out)
    return out


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    return np.stack([augment(img, rng, pad=pad, flip=flip) for img in images])
