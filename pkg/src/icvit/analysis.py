"""Evaluation instruments: channel-subset sweep, inter-channel correlation,
attention-map export and the attention cost model / step benchmark."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import dino as dino_mod
from . import numkernel as nk
from . import vit
from .data.batching import make_batches
from .sampling import SamplingStrategy, enumerate_subsets
from .trainer import evaluate


# -- channel-subset robustness ------------------------------------------------
@dataclass
class SubsetRow:
    k: int
    mean: float
    std: float
    n_combinations: int


@dataclass
class SubsetReport:
    rows: list  # SubsetRow for k = 1..C
    per_mask: list  # (k, mask_bits, accuracy)

    def row(self, k):
        return next(r for r in self.rows if r.k == k)

    def means(self):
        return [r.mean for r in self.rows]


def subset_sweep(params, cfg, test_set, n_channels=None, ks=None, batch_size=250):
    """Accuracy for every ``k``-of-``C`` channel mask, aggregated per ``k``.

    The standard deviation is taken over masks (population form), so the
    single full mask reports 0.
    """
    c = n_channels or test_set.channels
    rows, per_mask = [], []
    for k in ks or range(1, c + 1):
        accs = []
        for mask in enumerate_subsets(c, k):
            acc = evaluate(params, cfg, test_set, mask, batch_size)
            accs.append(acc)
            per_mask.append((k, str(mask), acc))
        rows.append(SubsetRow(k, float(np.mean(accs)), float(np.std(accs)), len(accs)))
    return SubsetReport(rows, per_mask)


def write_subset_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "mask_bits", "accuracy"])
        for k, bits, acc in report.per_mask:
            w.writerow([k, bits, f"{acc:.6f}"])


def write_subset_summary_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "n_combinations", "mean", "std"])
        for r in report.rows:
            w.writerow([r.k, r.n_combinations, f"{r.mean:.6f}", f"{r.std:.6f}"])


# -- correlation --------------------------------------------------------------
@dataclass
class CorrelationMatrix:
    values: np.ndarray  # [C, C]
    kind: str  # "token" or "feature"
    degenerate: bool = False  # some vector had zero variance; its entries were taken as 0

    def block_mean(self, rows, cols):
        vals = [self.values[i, j] for i in rows for j in cols if i != j]
        return float(np.mean(vals))


def _pearson_rows(a, b):
    """Row-wise Pearson correlation of ``a[..., D]`` and ``b[..., D]``; zero-variance rows give 0."""
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    den = np.sqrt((a * a).sum(axis=-1) * (b * b).sum(axis=-1))
    ok = den > 1e-12
    r = np.where(ok, (a * b).sum(axis=-1) / np.where(ok, den, 1.0), 0.0)
    return r, bool((~ok).any())


def _corr_matrix(vectors, kind):
    """``vectors[n, C, ..., D]`` -> channel-by-channel mean Pearson correlation."""
    c = vectors.shape[1]
    out = np.eye(c)
    degenerate = False
    for i in range(c):
        for j in range(i + 1, c):
            r, bad = _pearson_rows(vectors[:, i], vectors[:, j])
            out[i, j] = out[j, i] = float(r.mean())
            degenerate |= bad
    return CorrelationMatrix(out.astype(np.float32), kind, degenerate)


def channel_tokens(params, cfg, images):
    """Shared-projection patch tokens per channel, ``[n, C, N, D]``.

    Bias, position and channel embeddings are left out: they are identical
    (or channel-constant) offsets and would only inflate the correlation.
    """
    patches = vit.extract_patches(np.asarray(images, dtype=np.float64), cfg.patch_size)
    return patches @ params["patch_proj_cw.w"].data.astype(np.float64)


def token_correlation(params, cfg, images):
    """Position-matched Pearson correlation between channel tokens, averaged over positions and images."""
    if len(images) < 2:
        raise ValueError("need at least two images")
    return _corr_matrix(channel_tokens(params, cfg, images), "token")


def channel_features(params, cfg, images, batch_size=100):
    """Final-layer patch features averaged over each channel's positions, ``[n, C, D]``."""
    images = np.asarray(images)
    c = images.shape[3]
    feats = []
    for lo in range(0, len(images), batch_size):
        out = vit.encode(vit.patchify_channelwise(images[lo : lo + batch_size], list(range(c)), params, cfg), params, cfg)
        pf = out.patches.data
        feats.append(pf.reshape(pf.shape[0], c, -1, pf.shape[-1]).mean(axis=2))
    return np.concatenate(feats).astype(np.float64)


def feature_correlation(params, cfg, images):
    if len(images) < 2:
        raise ValueError("need at least two images")
    return _corr_matrix(channel_features(params, cfg, images), "feature")


def write_matrix_csv(mat, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        c = mat.values.shape[0]
        w.writerow([""] + [f"ch{j}" for j in range(c)])
        for i in range(c):
            w.writerow([f"ch{i}"] + [f"{v:.6f}" for v in mat.values[i]])


# -- frozen-feature probe -----------------------------------------------------
def cls_features(params, cfg, images, channel_ids=None, batch_size=250):
    """Final CLS features ``[n, D]`` of a frozen backbone (all channels by default)."""
    images = np.asarray(images)
    ids = list(range(images.shape[3])) if channel_ids is None else list(channel_ids)
    out = []
    for lo in range(0, len(images), batch_size):
        seq = vit.patchify(images[lo : lo + batch_size], params, cfg, ids)
        out.append(vit.encode(seq, params, cfg).cls.data)
    return np.concatenate(out).astype(np.float64)


def knn_accuracy(train_x, train_y, test_x, test_y, k=20):
    """Cosine k-nearest-neighbour vote after centring on the training mean.

    Ties go to the smallest label.
    """
    mu = train_x.mean(axis=0)

    def unit(x):
        x = x - mu
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.maximum(n, 1e-12)

    a, b = unit(train_x), unit(test_x)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    k = min(k, len(a))
    nearest = np.argsort(-(b @ a.T), axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(b), int(max(train_y.max(), test_y.max())) + 1))
    np.add.at(votes, (np.repeat(np.arange(len(b)), k), train_y[nearest].ravel()), 1)
    return float((votes.argmax(axis=1) == test_y).mean())


# -- attention maps -----------------------------------------------------------
def attention_maps(params, cfg, image, channel_ids=None):
    """Per-channel CLS attention maps ``[k, gh, gw]`` for one ``[H, W, C]`` image."""
    image = np.asarray(image)
    ids = list(range(image.shape[-1])) if channel_ids is None else list(channel_ids)
    seq = vit.patchify_channelwise(image[None], ids, params, cfg)
    out = vit.encode(seq, params, cfg, capture_attention=True)
    return vit.attention_rollout([a[0] for a in out.attention], seq.layout)


def _to_gray(maps):
    lo, hi = float(maps.min()), float(maps.max())
    if hi - lo <= 1e-12:
        return np.full(maps.shape, 128, dtype=np.uint8), lo, hi
    return np.round((maps - lo) / (hi - lo) * 255.0).astype(np.uint8), lo, hi


def write_pgm(path, gray):
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_attention(params, cfg, image, path_prefix, upscale=None):
    """Write one P5 graymap per channel plus ``<prefix>.json`` with raw ranges.

    All maps of one image share a single min-max normalisation so channels
    are comparable; a constant map is written as mid-grey.
    """
    maps = attention_maps(params, cfg, image)
    gray, lo, hi = _to_gray(maps)
    scale = cfg.patch_size if upscale is None else upscale
    paths = []
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path_prefix)), exist_ok=True)
        for c in range(maps.shape[0]):
            p = f"{path_prefix}_ch{c}.pgm"
            write_pgm(p, np.kron(gray[c], np.ones((scale, scale), dtype=np.uint8)))
            paths.append(p)
        side = {
            "channels": maps.shape[0],
            "grid": list(maps.shape[1:]),
            "upscale": scale,
            "normalization": "min-max over all channels",
            "raw_min": lo,
            "raw_max": hi,
            "per_channel": [
                {"channel": c, "file": os.path.basename(paths[c]), "min": float(maps[c].min()),
                 "max": float(maps[c].max()), "mass": float(maps[c].sum())}
                for c in range(maps.shape[0])
            ],
        }
        with open(f"{path_prefix}.json", "w") as f:
            json.dump(side, f, indent=2, sort_keys=True)
    except OSError as e:
        raise OSError(f"cannot write attention maps under {path_prefix!r}: {e}") from e
    return paths + [f"{path_prefix}.json"]


# -- cost model and benchmark -------------------------------------------------
@dataclass
class CostEstimate:
    seq_len: float
    flops_per_forward: float
    wall_ms: float | None = None
    strategy: str = ""
    extra: dict = field(default_factory=dict)


def flops_model(cfg, seq_len):
    """Forward cost of the encoder at sequence length ``L``.

    Per block: attention ``4 L D^2 + 2 L^2 D`` and MLP ``2 L D (r D) 2``;
    plus the patch projection over ``L - 1`` tokens and the classifier.
    """
    L, d = float(seq_len), float(cfg.dim)
    attn = 4 * L * d * d + 2 * L * L * d
    mlp = 2 * L * d * (cfg.mlp_ratio * d) * 2
    embed = 2 * (L - 1) * cfg.patch_size**2 * d
    head = 2 * d * cfg.num_classes
    return CostEstimate(L, cfg.depth * (attn + mlp) + embed + head)


def seq_len_for(strategy, cfg, n_channels):
    n = cfg.num_patches
    v = strategy.variant
    if cfg.patchify == "standard" or v == "isolated":
        return n + 1
    if v == "full":
        return n * n_channels + 1
    if v == "fixed":
        return n * sum(strategy.mask) + 1
    return n * (n_channels + 1) / 2 + 1  # HCS: mean of k uniform on 1..C


def benchmark_step(strategy, vcfg, dcfg, dataset, steps=50, warmup=5, seed=0):
    """Median wall time of self-distillation steps under ``strategy``."""
    strategy = SamplingStrategy.parse(strategy) if isinstance(strategy, str) else strategy
    state = dino_mod.init_state(vcfg, dcfg, seed)
    times, lens = [], []
    epoch = 0
    while len(times) < steps + warmup:
        brng = nk.make_rng(seed, "bench-batches", epoch)
        for batch in make_batches(dataset, dcfg.batch_size, strategy, brng, drop_last=True):
            t0 = time.perf_counter()
            rec = dino_mod.pretrain_step(batch, state, vcfg, dcfg, nk.make_rng(seed, "bench-views", state.step),
                                         steps + warmup)
            times.append((time.perf_counter() - t0) * 1e3)
            lens.append(rec["seq_len"])
            if len(times) >= steps + warmup:
                break
        epoch += 1
    measured = times[warmup:]
    est = flops_model(vcfg, float(np.mean(lens[warmup:])))
    est.wall_ms = float(np.median(measured))
    est.strategy = str(strategy)
    est.extra = {"channels": dataset.channels, "steps": steps, "mean_ms": float(np.mean(measured))}
    return est


def write_bench_csv(estimates, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["strategy", "channels", "L", "flops", "wall_ms"])
        for e in estimates:
            w.writerow([e.strategy, e.extra.get("channels", ""), f"{e.seq_len:g}", f"{e.flops_per_forward:.0f}",
                        "" if e.wall_ms is None else f"{e.wall_ms:.3f}"])
