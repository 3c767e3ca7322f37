"""Named, seedable random streams.

A stream is a Philox generator keyed by ``(seed, stream, step)`` so any
draw can be reproduced without replaying earlier ones.
"""

import zlib

import numpy as np


def stream_id(name):
    return zlib.crc32(name.encode("utf-8")) if isinstance(name, str) else int(name)


def make_rng(seed, stream=0, step=None):
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream_id(stream)]
    if step is not None:
        key.append(int(step))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal draws truncated to two standard deviations by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
