"""Datasets: a seeded synthetic generator and the CIFAR-10 binary-batch parser.

The synthetic generator exists so every experiment runs without external
data. Classes are separable by construction: each class re-centers its images
to a fixed global-mean level, the levels spaced evenly in [0.25, 0.75], so
the documented separating statistic is simply the image mean. Within a class,
a per-sample seeded pattern (gradient / disc / stripes family, cycling by
class) provides texture variety.

The CIFAR-10 reader is strict: any size or label inconsistency rejects the
whole file. A security-evaluation tool must not silently repair inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DataError, DomainError, FormatError
from .rng import RandomSource

RECORD_BYTES = 3073  # 1 label byte + 32*32*3 planar pixels
PATTERN_FAMILIES = ("gradient", "disc", "stripes")


@dataclass(frozen=True)
class SyntheticSpec:
    side: int = 16
    channels: int = 3
    classes: int = 4
    seed: int = 7

    def __post_init__(self):
        if self.side < 4:
            raise DomainError(f"side must be >= 4, got {self.side}")
        if self.channels not in (1, 3):
            raise DomainError(f"channels must be 1 or 3, got {self.channels}")
        if self.classes < 1:
            raise DomainError(f"classes must be >= 1, got {self.classes}")


@dataclass
class LabeledDataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


def class_mean_level(spec: SyntheticSpec, label: int) -> float:
    if spec.classes == 1:
        return 0.5
    return 0.25 + 0.5 * label / (spec.classes - 1)


def _pattern(family: str, side: int, rng: RandomSource) -> np.ndarray:
    yy, xx = np.meshgrid(
        np.linspace(-1.0, 1.0, side), np.linspace(-1.0, 1.0, side), indexing="ij"
    )
    if family == "gradient":
        theta = rng.uniform() * 2 * np.pi
        g = np.cos(theta) * xx + np.sin(theta) * yy
        return (g + np.sqrt(2)) / (2 * np.sqrt(2))
    if family == "disc":
        cy = (rng.uniform() - 0.5) * 0.6
        cx = (rng.uniform() - 0.5) * 0.6
        radius = 0.35 + 0.25 * rng.uniform()
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return np.clip((radius - r) * 4.0 + 0.5, 0.0, 1.0)
    # stripes
    freq = 2.0 + 2.0 * rng.uniform()
    phase = rng.uniform() * 2 * np.pi
    axis = xx if rng.uniform() < 0.5 else yy
    return 0.5 + 0.5 * np.sin(freq * np.pi * axis + phase)


def gen_synthetic(spec: SyntheticSpec, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic labeled images in [0, 1]; labels cycle through the classes.

    Each image is re-centered to its class mean level with contrast scaled so
    no clipping occurs, keeping the class-mean statistic exact.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    images = np.zeros((count, spec.side, spec.side, spec.channels))
    labels = np.arange(count, dtype=np.int64) % spec.classes
    root = RandomSource(spec.seed).derive("synthetic")
    for i in range(count):
        rng = root.derive(f"sample-{i}")
        label = int(labels[i])
        family = PATTERN_FAMILIES[label % len(PATTERN_FAMILIES)]
        base = _pattern(family, spec.side, rng)
        img = np.zeros((spec.side, spec.side, spec.channels))
        for ch in range(spec.channels):
            tint = 0.75 + 0.5 * rng.uniform()
            img[:, :, ch] = base * tint
        centered = img - img.mean()
        level = class_mean_level(spec, label)
        span = float(np.max(np.abs(centered)))
        headroom = min(level, 1.0 - level) * 0.9
        scale = headroom / span if span > 1e-12 else 0.0
        images[i] = level + centered * scale
    return images, labels


def make_labeled_dataset(spec: SyntheticSpec, train: int, test: int) -> LabeledDataset:
    images, labels = gen_synthetic(spec, train + test)
    return LabeledDataset(
        train_images=images[:train],
        train_labels=labels[:train],
        test_images=images[train:],
        test_labels=labels[train:],
    )


def load_cifar10(paths) -> tuple[np.ndarray, np.ndarray]:
    """Parse CIFAR-10 binary batch files into float images in [0, 1].

    Each 3073-byte record is one label byte followed by 32*32 red, green and
    blue planes; planes are interleaved here to (32, 32, 3) and scaled by
    1/255. Files are processed in sorted path order, records in file order.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    paths = sorted(Path(p) for p in paths)
    if not paths:
        raise DataError("no CIFAR-10 batch files given")
    all_images = []
    all_labels = []
    for path in paths:
        blob = path.read_bytes()
        if len(blob) == 0 or len(blob) % RECORD_BYTES != 0:
            raise FormatError(
                f"{path}: size {len(blob)} is not a positive multiple of {RECORD_BYTES}; "
                f"trailing fragment starts at offset {len(blob) - (len(blob) % RECORD_BYTES)}"
            )
        raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
        labels = raw[:, 0].astype(np.int64)
        bad = np.nonzero(labels >= 10)[0]
        if bad.size:
            raise CorruptionError(
                f"{path}: record {int(bad[0])} has label {int(labels[bad[0]])} >= 10"
            )
        planes = raw[:, 1:].reshape(-1, 3, 32, 32)
        images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
        all_images.append(images)
        all_labels.append(labels)
    return np.concatenate(all_images), np.concatenate(all_labels)
