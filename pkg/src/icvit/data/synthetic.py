"""Synthetic two-modality multi-channel images.

Channels ``0..n_fl-1`` mimic fluorescence: dark background with a few bright
motifs whose arrangement (single blob, horizontal pair, vertical pair or
2x2 cluster) encodes one label factor. The remaining channels mimic
brightfield: a bright, low-contrast oriented grating shared by all of them
(each with its own small noise), whose orientation encodes the other factor.
The label is ``factor * orientation + arrangement``, so no single channel
determines it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..numkernel import make_rng
from .dataset import MCDataset

MOTIFS = (
    ((0.0, 0.0),),
    ((0.0, -1.0), (0.0, 1.0)),
    ((-1.0, 0.0), (1.0, 0.0)),
    ((-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)),
)


@dataclass
class SyntheticSpec:
    height: int = 32
    width: int = 32
    channels: int = 8
    num_classes: int = 16
    factor: int = 4
    fl_channels: int = 5
    noise: float = 0.25
    motifs_per_plane: int = 2
    motif_presence: float = 1.0
    motif_spacing: float = 2.5
    blob_sigma: float = 1.0
    blob_amplitude: tuple = (1.0, 1.0)
    bf_level: float = 1.0
    bf_contrast: float = 0.3
    bf_period: tuple = (5.0, 8.0)
    bf_angles: tuple = (0.0, 30.0, 60.0, 90.0)
    bf_plane_noise: float = 0.05
    n_train: int = 3000
    n_val: int = 500
    n_test: int = 500

    def validate(self):
        if self.num_classes % self.factor:
            raise ValueError(f"num_classes {self.num_classes} is not divisible by factor {self.factor}")
        if self.factor > len(MOTIFS):
            raise ValueError(f"at most {len(MOTIFS)} motif types are available")
        n_orient = self.num_classes // self.factor
        if n_orient != len(self.bf_angles):
            raise ValueError(f"{n_orient} orientation classes but {len(self.bf_angles)} angles")
        if not 0 < self.fl_channels < self.channels:
            raise ValueError("need at least one channel of each modality")
        if min(self.height, self.width) < 8:
            raise ValueError("images must be at least 8x8")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    def to_dict(self):
        return asdict(self)

    @property
    def bf_channels(self):
        return list(range(self.fl_channels, self.channels))


def split_label(label, factor):
    """``label -> (arrangement, orientation)``."""
    return label % factor, label // factor


def _balanced_labels(n, k, rng):
    labels = np.arange(n) % k
    rng.shuffle(labels)
    return labels


def render(spec, labels, rng):
    """Pixels ``[n, H, W, C]`` (float32) for the given labels."""
    n = len(labels)
    h, w, c = spec.height, spec.width, spec.channels
    arrangement, orientation = split_label(np.asarray(labels), spec.factor)
    yy = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)
    out = np.empty((n, h, w, c), dtype=np.float32)

    # fluorescence: motifs at random positions, one arrangement per image
    nf, m = spec.fl_channels, spec.motifs_per_plane
    margin = 2.0 + spec.motif_spacing
    cy = rng.uniform(margin, h - 1 - margin, size=(n, nf, m))
    cx = rng.uniform(margin, w - 1 - margin, size=(n, nf, m))
    amp = rng.uniform(*spec.blob_amplitude, size=(n, nf, m))
    amp *= rng.random((n, nf, m)) < spec.motif_presence
    fl = np.zeros((n, nf, h, w))
    s2 = 2.0 * spec.blob_sigma**2
    for t in range(spec.factor):
        sel = arrangement == t
        if not sel.any():
            continue
        for dy, dx in MOTIFS[t]:
            py = cy[sel] + dy * spec.motif_spacing
            px = cx[sel] + dx * spec.motif_spacing
            gy = np.exp(-((yy - py[..., None]) ** 2) / s2)
            gx = np.exp(-((xx - px[..., None]) ** 2) / s2)
            fl[sel] += np.einsum("bpm,bpmy,bpmx->bpyx", amp[sel], gy, gx)
    fl += rng.normal(0.0, spec.noise, size=fl.shape)
    out[..., :nf] = fl.transpose(0, 2, 3, 1)

    # brightfield: shared oriented grating, near-duplicated across planes
    theta = np.deg2rad(np.asarray(spec.bf_angles)[orientation])
    period = rng.uniform(*spec.bf_period, size=n)
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    proj = np.cos(theta)[:, None, None] * xx[None, None, :] + np.sin(theta)[:, None, None] * yy[None, :, None]
    tex = spec.bf_level + spec.bf_contrast * np.sin(2 * np.pi * proj / period[:, None, None] + phase[:, None, None])
    nb = c - nf
    shared = rng.normal(0.0, spec.noise * 0.25, size=(n, h, w))
    bf = tex[:, None] + shared[:, None] + rng.normal(0.0, spec.bf_plane_noise, size=(n, nb, h, w))
    out[..., nf:] = bf.transpose(0, 2, 3, 1)
    return out


def generate_synthetic(spec: SyntheticSpec, seed=0):
    """Return ``{"train", "val", "test"}`` datasets, deterministic in ``seed``."""
    spec.validate()
    splits = {}
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        rng = make_rng(seed, f"synthetic-{name}")
        labels = _balanced_labels(n, spec.num_classes, rng)
        pixels = render(spec, labels, rng)
        splits[name] = MCDataset.from_arrays(pixels, labels, spec.num_classes)
    return splits
