"""Binary container formats for datasets (``MCID``) and checkpoints (``ICVK``).

Both are little-endian with a magic tag and a ``u16`` version.

Dataset layout::

    b"MCID" | u16 version | u32 count | u16 H | u16 W | u16 C | u16 num_classes
    | f32[C] mean | f32[C] std | count x (u16 label | f32[H*W*C] pixels)

Checkpoint layout::

    b"ICVK" | u16 version | u32 meta_len | meta_len bytes of UTF-8 JSON
    | u32 n_tensors | n_tensors x (u16 name_len | name | u8 dtype | u8 ndim
    | u32[ndim] shape | u64 nbytes | payload)
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from ..errors import FormatError
from .dataset import MCDataset

DATASET_MAGIC = b"MCID"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"ICVK"
CHECKPOINT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<i4"), 4: np.dtype("u1")}
_DTYPE_TAGS = {v.str: k for k, v in _DTYPES.items()}


class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n, field):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated while reading {field}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, field):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, field))


def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# -- datasets -----------------------------------------------------------------
def dataset_to_bytes(ds: MCDataset):
    n, h, w, c = ds.pixels.shape
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<HIHHHH", DATASET_VERSION, n, h, w, c, ds.num_classes))
    out.write(np.asarray(ds.mean, "<f4").tobytes())
    out.write(np.asarray(ds.std, "<f4").tobytes())
    rec = np.zeros(n, dtype=[("label", "<u2"), ("pixels", "<f4", (h * w * c,))])
    rec["label"] = ds.labels
    rec["pixels"] = ds.pixels.reshape(n, -1)
    out.write(rec.tobytes())
    return out.getvalue()


def dataset_from_bytes(buf):
    r = _Reader(buf, "dataset")
    magic = r.take(4, "magic")
    if magic != DATASET_MAGIC:
        raise FormatError(f"dataset: bad magic {magic!r}", 0)
    version, n, h, w, c, k = r.unpack("<HIHHHH", "header")
    if version != DATASET_VERSION:
        raise FormatError(f"dataset: unsupported version {version}", 4)
    if min(h, w, c, k) == 0:
        raise FormatError("dataset: zero extent in header", 6)
    mean = np.frombuffer(r.take(4 * c, "mean"), "<f4").copy()
    std = np.frombuffer(r.take(4 * c, "std"), "<f4").copy()
    rec_size = 2 + 4 * h * w * c
    body = len(buf) - r.pos
    if body != n * rec_size:
        raise FormatError(
            f"dataset: header count {n} needs {n * rec_size} record bytes but {body} are present", r.pos
        )
    rec = np.frombuffer(buf, dtype=[("label", "<u2"), ("pixels", "<f4", (h * w * c,))], count=n, offset=r.pos)
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise FormatError(f"dataset: record {bad} has label {labels[bad]} >= num_classes {k}", r.pos + bad * rec_size)
    pixels = rec["pixels"].reshape(n, h, w, c).astype(np.float32)
    if not np.isfinite(pixels).all():
        bad = int(np.argmax(~np.isfinite(pixels).reshape(n, -1).all(axis=1)))
        raise FormatError(f"dataset: record {bad} has non-finite pixels", r.pos + bad * rec_size)
    return MCDataset(pixels, labels, int(k), mean, std)


def save_dataset(path, ds):
    _atomic_write(path, dataset_to_bytes(ds))


def load_dataset(path, normalize=None):
    """Read a dataset file.

    ``normalize`` may be ``True`` (z-score with the file's own statistics) or
    a ``(mean, std)`` pair, typically the training split's statistics.
    """
    with open(path, "rb") as f:
        ds = dataset_from_bytes(f.read())
    if normalize is True:
        return ds.normalized()
    if normalize is not None:
        return ds.normalized(*normalize)
    return ds


# -- checkpoints --------------------------------------------------------------
def _items(tensors):
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise ValueError(f"checkpoint: duplicate tensor name {name!r}")
        seen.add(name)
    return items


def checkpoint_to_bytes(tensors, meta=None):
    """``tensors`` is a mapping or a sequence of ``(name, array)`` pairs."""
    out = io.BytesIO()
    meta_b = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    items = _items(tensors)
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<HI", CHECKPOINT_VERSION, len(meta_b)))
    out.write(meta_b)
    out.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(getattr(arr, "data", arr))
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        tag = _DTYPE_TAGS.get(np.dtype(dt).str)
        if tag is None:
            raise ValueError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<BB", tag, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def checkpoint_from_bytes(buf):
    """Return ``(tensors, meta)``; raises :class:`FormatError` on any corruption."""
    r = _Reader(buf, "checkpoint")
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"checkpoint: bad magic {magic!r}", 0)
    version, meta_len = r.unpack("<HI", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}", 4)
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint: metadata is not valid JSON ({e})", meta_at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"checkpoint: tensor {i} name is not UTF-8", at) from None
        if name in tensors:
            raise FormatError(f"checkpoint: duplicate tensor {name!r}", at)
        tag, ndim = r.unpack("<BB", f"dtype of {name!r}")
        if tag not in _DTYPES:
            raise FormatError(f"checkpoint: tensor {name!r} has unknown dtype tag {tag}", r.pos - 2)
        shape = r.unpack(f"<{ndim}I", f"shape of {name!r}")
        (nbytes,) = r.unpack("<Q", f"size of {name!r}")
        dt = _DTYPES[tag]
        expect = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != expect:
            raise FormatError(
                f"checkpoint: tensor {name!r} declares shape {tuple(shape)} ({expect} bytes) but payload is {nbytes} bytes",
                at,
            )
        payload = r.take(nbytes, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise FormatError(f"checkpoint: {len(buf) - r.pos} trailing bytes", r.pos)
    return tensors, meta


def save_checkpoint(path, tensors, meta=None):
    _atomic_write(path, checkpoint_to_bytes(tensors, meta))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
