"""Seeded synthetic image classification: class-conditioned Gaussian blobs.

Class ``c`` places a bright blob near anchor ``c`` (anchors spread on a circle
around the image centre) with per-sample jitter, width and amplitude, plus
pixel noise. Splits are drawn from disjoint Rng streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch import ArchSpec
from .numerics import Rng

SPLITS = ("train", "val", "test")
_SPLIT_STREAM = {"train": 11, "val": 12, "test": 13}


@dataclass(frozen=True)
class Split:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.labels.size

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        idx = np.arange(len(self)) if order is None else order
        for start in range(0, idx.size, batch_size):
            sel = idx[start : start + batch_size]
            yield self.images[sel], self.labels[sel]


@dataclass(frozen=True)
class SyntheticTask:
    num_classes: int = 4
    channels: int = 1
    img: int = 16
    n_train: int = 256
    n_val: int = 128
    n_test: int = 128
    noise: float = 0.3
    jitter: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample")

    @classmethod
    def for_arch(cls, arch: ArchSpec, **kw) -> "SyntheticTask":
        return cls(num_classes=arch.num_classes, channels=arch.channels, img=arch.img, **kw)

    def anchors(self) -> np.ndarray:
        c = (self.img - 1) / 2.0
        radius = self.img / 4.0
        ang = 2 * np.pi * np.arange(self.num_classes) / self.num_classes
        return np.stack([c + radius * np.sin(ang), c + radius * np.cos(ang)], axis=1)

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; choose from {SPLITS}")
        n = {"train": self.n_train, "val": self.n_val, "test": self.n_test}[name]
        rng = Rng(self.seed, _SPLIT_STREAM[name])
        # balanced labels in a seeded order
        labels = np.resize(np.arange(self.num_classes), n)[rng.permutation(n)]
        centres = self.anchors()[labels] + self.jitter * rng.normal(2 * n).reshape(n, 2)
        width = 1.5 + 0.5 * rng.uniform(n)
        amp = 1.0 + 0.25 * rng.normal(n)
        yy, xx = np.mgrid[0 : self.img, 0 : self.img].astype(float)
        d2 = (yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2
        blob = amp[:, None, None] * np.exp(-d2 / (2 * width[:, None, None] ** 2))
        images = np.repeat(blob[:, None], self.channels, axis=1)
        images = images + self.noise * rng.normal(images.size).reshape(images.shape)
        return Split(images=images, labels=labels.astype(np.int64))
