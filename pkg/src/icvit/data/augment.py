"""View augmentations on ``[B, H, W, k]`` plane stacks."""

import math

import numpy as np


def _crop_boxes(rng, b, h, w, scale, ratio):
    area = h * w
    target = area * rng.uniform(scale[0], scale[1], size=b)
    logr = rng.uniform(math.log(ratio[0]), math.log(ratio[1]), size=b)
    ar = np.exp(logr)
    ch = np.clip(np.sqrt(target / ar), 1.0, h)
    cw = np.clip(np.sqrt(target * ar), 1.0, w)
    y0 = rng.uniform(0.0, 1.0, size=b) * (h - ch)
    x0 = rng.uniform(0.0, 1.0, size=b) * (w - cw)
    return y0, x0, ch, cw


def _bilinear(planes, ys, xs):
    """Sample ``planes[b]`` at the grid ``ys[b] x xs[b]`` (pixel-centre coordinates)."""
    b, h, w, _ = planes.shape
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, :, None, None]
    fx = (xs - x0)[:, None, :, None]
    bi = np.arange(b)[:, None, None]

    def at(yi, xi):
        return planes[bi, yi[:, :, None], xi[:, None, :]]

    top = at(y0, x0) * (1 - fx) + at(y0, x1) * fx
    bot = at(y1, x0) * (1 - fx) + at(y1, x1) * fx
    return top * (1 - fy) + bot * fy


def random_resized_crop(planes, out_size, rng, scale=(0.4, 1.0), ratio=(3 / 4, 4 / 3)):
    """Crop a random box per image and resample it to ``out_size`` x ``out_size``."""
    b, h, w, _ = planes.shape
    y0, x0, ch, cw = _crop_boxes(rng, b, h, w, scale, ratio)
    t = (np.arange(out_size) + 0.5) / out_size
    ys = y0[:, None] + t[None, :] * ch[:, None] - 0.5
    xs = x0[:, None] + t[None, :] * cw[:, None] - 0.5
    return _bilinear(planes, ys, xs).astype(planes.dtype)


def random_hflip(planes, rng, p=0.5):
    flip = rng.random(planes.shape[0]) < p
    out = planes.copy()
    out[flip] = out[flip, :, ::-1]
    return out


def add_noise(planes, rng, sigma):
    if sigma <= 0:
        return planes
    return (planes + rng.normal(0.0, sigma, size=planes.shape)).astype(planes.dtype)
