"""Channel-selection strategies for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np


@dataclass(frozen=True)
class SamplingStrategy:
    """``variant`` is one of ``isolated``, ``hcs``, ``full`` or ``fixed``."""

    variant: str = "isolated"
    mask: tuple | None = None

    def __post_init__(self):
        if self.variant not in ("isolated", "hcs", "full", "fixed"):
            raise ValueError(f"unknown sampling variant {self.variant!r}")
        if self.variant == "fixed":
            if self.mask is None or not any(self.mask):
                raise ValueError("fixed subset needs a non-empty mask")

    @classmethod
    def isolated(cls):
        return cls("isolated")

    @classmethod
    def hcs(cls):
        return cls("hcs")

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def fixed(cls, mask):
        return cls("fixed", tuple(bool(b) for b in mask))

    @classmethod
    def parse(cls, text):
        text = text.strip().lower()
        if text in ("isolated", "hcs", "full"):
            return cls(text)
        if text.startswith("fixed:"):
            return cls.fixed(ChannelMask.from_indices(parse_index_list(text[6:])).bits)
        raise ValueError(f"unknown strategy {text!r}")

    def __str__(self):
        if self.variant == "fixed":
            return "fixed:" + ",".join(map(str, ChannelMask(self.mask).indices()))
        return self.variant


@dataclass(frozen=True)
class ChannelMask:
    bits: tuple

    @classmethod
    def from_indices(cls, indices, n=None):
        indices = sorted(set(int(i) for i in indices))
        n = n if n is not None else (indices[-1] + 1 if indices else 0)
        if indices and (indices[0] < 0 or indices[-1] >= n):
            raise ValueError(f"channel index out of range for {n} channels")
        return cls(tuple(i in indices for i in range(n)))

    @classmethod
    def full(cls, n):
        return cls((True,) * n)

    def indices(self):
        return [i for i, b in enumerate(self.bits) if b]

    def popcount(self):
        return sum(self.bits)

    def __str__(self):
        return "".join("1" if b else "0" for b in self.bits)


def parse_index_list(text):
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def sample(strategy, n_channels, rng, batch=None):
    """Draw channel indices.

    Returns a list for a single image, or a ``[batch, k]`` array when
    ``batch`` is given. Isolated draws are independent per image. HCS draws
    one subset size ``k`` per call (so the batch stays rectangular) and an
    independent uniform ``k``-subset per image.
    """
    if n_channels < 1:
        raise ValueError("need at least one channel")
    b = 1 if batch is None else int(batch)
    v = strategy.variant
    if v == "isolated":
        out = rng.integers(0, n_channels, size=(b, 1))
    elif v == "full":
        out = np.broadcast_to(np.arange(n_channels), (b, n_channels)).copy()
    elif v == "fixed":
        idx = ChannelMask(strategy.mask).indices()
        if idx[-1] >= n_channels:
            raise ValueError(f"mask selects channel {idx[-1]} of a {n_channels}-channel image")
        out = np.broadcast_to(np.asarray(idx), (b, len(idx))).copy()
    else:
        k = int(rng.integers(1, n_channels + 1))
        out = np.stack([np.sort(rng.choice(n_channels, size=k, replace=False)) for _ in range(b)])
    out = out.astype(np.int64)
    return out[0].tolist() if batch is None else out


def enumerate_subsets(n_channels, k):
    """All ``k``-subsets of ``range(n_channels)`` as masks, lexicographic by index tuple."""
    if not 1 <= k <= n_channels:
        raise ValueError(f"k={k} out of range for {n_channels} channels")
    return [ChannelMask.from_indices(c, n_channels) for c in combinations(range(n_channels), k)]
