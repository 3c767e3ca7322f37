"""In-memory multi-channel image containers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MCImage:
    pixels: np.ndarray  # [H, W, C] float32
    label: int

    @property
    def channel_count(self):
        return self.pixels.shape[-1]


@dataclass
class MCDataset:
    pixels: np.ndarray  # [n, H, W, C] float32
    labels: np.ndarray  # [n] int64
    num_classes: int
    mean: np.ndarray  # [C] float32, per-channel statistics of ``pixels``
    std: np.ndarray

    @classmethod
    def from_arrays(cls, pixels, labels, num_classes):
        pixels = np.ascontiguousarray(pixels, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if pixels.ndim != 4 or len(labels) != len(pixels):
            raise ValueError(f"pixels {pixels.shape} and labels {labels.shape} do not describe one dataset")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError("label out of range")
        mean, std = channel_stats(pixels)
        return cls(pixels, labels, int(num_classes), mean, std)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return MCImage(self.pixels[i], int(self.labels[i]))

    @property
    def shape(self):
        """``(H, W, C)`` shared by all records."""
        return tuple(self.pixels.shape[1:])

    @property
    def channels(self):
        return self.pixels.shape[3]

    def subset(self, idx):
        return MCDataset.from_arrays(self.pixels[idx], self.labels[idx], self.num_classes)

    def normalized(self, mean=None, std=None):
        """Per-channel z-scored copy, by default with this dataset's own statistics."""
        mean = self.mean if mean is None else np.asarray(mean, np.float32)
        std = self.std if std is None else np.asarray(std, np.float32)
        px = (self.pixels - mean) / np.maximum(std, 1e-8)
        return MCDataset.from_arrays(px, self.labels, self.num_classes)

    def select_channels(self, channels):
        return MCDataset.from_arrays(self.pixels[..., list(channels)], self.labels, self.num_classes)


def channel_stats(pixels):
    if len(pixels) == 0:
        c = pixels.shape[-1]
        return np.zeros(c, np.float32), np.ones(c, np.float32)
    flat = pixels.reshape(-1, pixels.shape[-1]).astype(np.float64)
    return flat.mean(axis=0).astype(np.float32), flat.std(axis=0).astype(np.float32)
