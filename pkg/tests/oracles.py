"""Independent reference implementations used only by the tests.

Nothing here imports the code paths it checks: the naive loops and the
template matcher are written from their definitions.
"""

import itertools
import math

import numpy as np
from scipy.signal import correlate

from icvit.data.synthetic import MOTIFS


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def naive_attention(x, wqkv, bqkv, wo, bo):
    """Single-head self-attention on ``x[L, D]`` with explicit loops."""
    x = x.astype(np.float64)
    length, d = x.shape
    qkv = naive_matmul(x, wqkv.astype(np.float64)) + bqkv
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    out = np.zeros((length, d))
    for i in range(length):
        scores = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) for j in range(length)]
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        z = sum(e)
        for j in range(length):
            out[i] += (e[j] / z) * v[j]
    return naive_matmul(out, wo.astype(np.float64)) + bo


def motif_template(kind, spacing, sigma, size=9):
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    t = np.zeros((size, size))
    for dy, dx in MOTIFS[kind]:
        t += np.exp(-((yy - c - dy * spacing) ** 2 + (xx - c - dx * spacing) ** 2) / (2 * sigma**2))
    t -= t.mean()
    return t / np.linalg.norm(t)


def arrangement_scores(planes, spec):
    """Brute-force matched filtering: ``[n, factor]`` log-odds-like scores from FL planes ``[n, H, W, k]``."""
    n = planes.shape[0]
    scores = np.zeros((n, spec.factor))
    for kind in range(spec.factor):
        tmpl = motif_template(kind, spec.motif_spacing, spec.blob_sigma)
        for i in range(n):
            for c in range(planes.shape[3]):
                r = correlate(planes[i, :, :, c], tmpl, mode="same")
                top = np.sort(r.ravel())[-spec.motifs_per_plane :]
                scores[i, kind] += top.sum()
    return scores


def orientation_scores(planes, spec, n_period=13, n_phase=8):
    """Grating matched filter maximised over a period/phase grid, summed over planes."""
    n, h, w, k = planes.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    periods = np.linspace(spec.bf_period[0], spec.bf_period[1], n_period)
    phases = np.linspace(0, 2 * np.pi, n_phase, endpoint=False)
    flat = (planes - planes.mean(axis=(1, 2), keepdims=True)).reshape(n, h * w, k).mean(axis=2)
    scores = np.zeros((n, len(spec.bf_angles)))
    for o, ang in enumerate(spec.bf_angles):
        th = math.radians(ang)
        proj = math.cos(th) * xx + math.sin(th) * yy
        bank = []
        for per, ph in itertools.product(periods, phases):
            g = np.sin(2 * np.pi * proj / per + ph).ravel()
            g -= g.mean()
            bank.append(g / np.linalg.norm(g))
        resp = flat @ np.stack(bank).T
        scores[:, o] = resp.max(axis=1)
    return scores


def template_oracle_predict(pixels, spec, channels):
    """Nearest-template label using only ``channels``; missing factors default to 0."""
    channels = sorted(channels)
    fl = [c for c in channels if c < spec.fl_channels]
    bf = [c for c in channels if c >= spec.fl_channels]
    n = pixels.shape[0]
    g_a = np.zeros(n, dtype=int)
    g_b = np.zeros(n, dtype=int)
    if fl:
        g_a = arrangement_scores(pixels[..., fl], spec).argmax(axis=1)
    if bf:
        g_b = orientation_scores(pixels[..., bf], spec).argmax(axis=1)
    return spec.factor * g_b + g_a


def pearson(a, b):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    return float((a @ b) / math.sqrt((a @ a) * (b @ b)))


def knn_oracle(train_x, train_y, test_x, test_y, k):
    """Per-query loops: centre, cosine similarity, stable top-k, majority vote (smallest label wins ties)."""
    mu = [sum(col) / len(train_x) for col in zip(*train_x)]

    def unit(v):
        c = [a - m for a, m in zip(v, mu)]
        n = math.sqrt(sum(a * a for a in c)) or 1e-12
        return [a / n for a in c]

    a = [unit(v) for v in train_x]
    hits = 0
    for q, y in zip(test_x, test_y):
        u = unit(q)
        sims = [(-sum(x * z for x, z in zip(u, r)), i) for i, r in enumerate(a)]
        top = [i for _, i in sorted(sims)[:k]]
        counts = {}
        for i in top:
            counts[int(train_y[i])] = counts.get(int(train_y[i]), 0) + 1
        best = max(counts.values())
        hits += min(lab for lab, c in counts.items() if c == best) == int(y)
    return hits / len(test_x)
