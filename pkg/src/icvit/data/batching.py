"""Mini-batch iteration with per-image channel selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sampling import sample


@dataclass
class Batch:
    pixels: np.ndarray  # [B, H, W, k] selected planes
    labels: np.ndarray  # [B]
    channel_ids: np.ndarray  # [B, k] dataset channel index of each plane
    source: np.ndarray  # [B] index of the originating dataset


def _sources(datasets):
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    hw = {d.shape[:2] for d in datasets}
    if len(hw) != 1:
        raise ValueError(f"datasets disagree on image size: {sorted(hw)}")
    return list(datasets)


def select_channels(channel_counts, strategy, rng):
    """Per-image channel ids ``[B, k]`` for images with (possibly different) channel counts."""
    counts = np.asarray(channel_counts)
    if strategy.variant == "isolated":
        return rng.integers(0, counts)[:, None].astype(np.int64)
    if len(set(counts.tolist())) != 1:
        raise ValueError(
            f"strategy {strategy} cannot batch images with channel counts {sorted(set(counts.tolist()))}; "
            "use isolated sampling"
        )
    return sample(strategy, int(counts[0]), rng, batch=len(counts))


def make_batches(datasets, batch_size, strategy, rng, drop_last=False, shuffle=True):
    """Yield :class:`Batch` objects covering every sample once per call.

    ``datasets`` may be a single dataset or a list whose members share image
    size but not necessarily channel count. With isolated sampling each
    batch is ``[B, H, W, 1]`` whatever the source channel counts are.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    sources = _sources(datasets)
    src = np.concatenate([np.full(len(d), i) for i, d in enumerate(sources)]).astype(np.int64)
    local = np.concatenate([np.arange(len(d)) for d in sources]).astype(np.int64)
    order = rng.permutation(len(src)) if shuffle else np.arange(len(src))
    for lo in range(0, len(order), batch_size):
        sel = order[lo : lo + batch_size]
        if drop_last and len(sel) < batch_size:
            break
        counts = np.array([sources[s].channels for s in src[sel]])
        ids = select_channels(counts, strategy, rng)
        planes = np.stack(
            [sources[s].pixels[i][..., ids[j]] for j, (s, i) in enumerate(zip(src[sel], local[sel]))]
        )
        labels = np.array([sources[s].labels[i] for s, i in zip(src[sel], local[sel])], dtype=np.int64)
        yield Batch(planes, labels, ids, src[sel])
