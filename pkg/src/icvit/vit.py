"""Vision-transformer backbone with standard and channel-wise patch embedding.

Parameters live in a flat ``dict`` of named leaf tensors so they can be
copied, averaged and serialized without a module system.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, ContractError
from .numkernel import Tensor


@dataclass
class ViTConfig:
    image_h: int = 32
    image_w: int = 32
    patch_size: int = 8
    max_channels: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    num_classes: int = 16
    # "channelwise" shares one P*P -> D projection over channels;
    # "standard" fuses all in_chans planes into one P*P*C -> D projection.
    patchify: str = "channelwise"
    in_chans: int = 8
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self):
        p = self.patch_size
        if p < 1 or self.image_h % p or self.image_w % p:
            raise ConfigError(f"image {self.image_h}x{self.image_w} is not divisible by patch size {p}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.patchify not in ("channelwise", "standard"):
            raise ConfigError(f"unknown patchify mode {self.patchify!r}")
        if min(self.max_channels, self.dim, self.num_classes, self.in_chans) < 1 or self.depth < 0:
            raise ConfigError("counts must be positive")

    @property
    def grid(self):
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def mlp_hidden(self):
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self):
        return asdict(self)


@dataclass
class TokenLayout:
    has_cls: bool
    n_patches: int
    grid: tuple
    channel_ids: np.ndarray | None = None  # [B, k]; None for fused tokens


@dataclass
class TokenSequence:
    tokens: Tensor  # [B, L, D]
    layout: TokenLayout

    @property
    def length(self):
        return self.tokens.shape[1]


@dataclass
class EncoderOutput:
    cls: Tensor  # [B, D]
    patches: Tensor  # [B, L-1, D]
    attention: list | None = field(default=None)  # per layer: [B, heads, L, L]


# -- parameters ---------------------------------------------------------------
def init_params(cfg: ViTConfig, seed=0, head=True):
    rng = nk.make_rng(seed, "vit-init")
    dt = nk.get_dtype()
    d, p2 = cfg.dim, cfg.patch_size**2

    def tn(*shape):
        return nk.parameter(nk.trunc_normal(rng, shape, 0.02, dt))

    def zeros(*shape):
        return nk.parameter(np.zeros(shape, dt))

    def ones(*shape):
        return nk.parameter(np.ones(shape, dt))

    params = {}
    if cfg.patchify == "channelwise":
        params["patch_proj_cw.w"] = tn(p2, d)
        params["patch_proj_cw.b"] = zeros(d)
        params["chan_embed"] = tn(cfg.max_channels, d)
    else:
        params["patch_proj_std.w"] = tn(p2 * cfg.in_chans, d)
        params["patch_proj_std.b"] = zeros(d)
    params["pos_embed"] = tn(cfg.num_patches, d)
    params["cls_token"] = tn(1, d)
    h = cfg.mlp_hidden
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        params[pre + "ln1.g"] = ones(d)
        params[pre + "ln1.b"] = zeros(d)
        params[pre + "attn.qkv.w"] = tn(d, 3 * d)
        params[pre + "attn.qkv.b"] = zeros(3 * d)
        params[pre + "attn.proj.w"] = tn(d, d)
        params[pre + "attn.proj.b"] = zeros(d)
        params[pre + "ln2.g"] = ones(d)
        params[pre + "ln2.b"] = zeros(d)
        params[pre + "mlp.fc1.w"] = tn(d, h)
        params[pre + "mlp.fc1.b"] = zeros(h)
        params[pre + "mlp.fc2.w"] = tn(h, d)
        params[pre + "mlp.fc2.b"] = zeros(d)
    params["norm.g"] = ones(d)
    params["norm.b"] = zeros(d)
    if head:
        params.update(init_head(cfg))
    return params


def init_head(cfg):
    """Classifier head, zero-initialised so the first prediction is uniform."""
    dt = nk.get_dtype()
    return {
        "head.w": nk.parameter(np.zeros((cfg.dim, cfg.num_classes), dt)),
        "head.b": nk.parameter(np.zeros(cfg.num_classes, dt)),
    }


def backbone_names(params):
    return [k for k in params if not k.startswith(("head.", "dino_head."))]


# -- patch embedding ----------------------------------------------------------
def extract_patches(pixels, p):
    """``[B, H, W, C]`` -> ``[B, C, N, P*P]`` in row-major patch order."""
    b, h, w, c = pixels.shape
    x = pixels.reshape(b, h // p, p, w // p, p, c)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, (h // p) * (w // p), p * p)


def _interp_matrix(n_out, n_in):
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def pos_embed_for(params, cfg, grid):
    """Position embeddings for a patch grid, bilinearly resampled if it differs from the config grid."""
    pe = params["pos_embed"]
    if tuple(grid) == cfg.grid:
        return pe
    gh, gw = cfg.grid
    m = np.kron(_interp_matrix(grid[0], gh), _interp_matrix(grid[1], gw))
    return nk.matmul(Tensor(m), pe)


def _as_batch(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        return pixels[None], True
    if pixels.ndim != 4:
        raise ValueError(f"expected [H, W, C] or [B, H, W, C] pixels, got shape {pixels.shape}")
    return pixels, False


def _with_cls(emb, params):
    b, _, d = emb.shape
    cls = nk.broadcast_to(nk.reshape(params["cls_token"], (1, 1, d)), (b, 1, d))
    return nk.concat([cls, emb], axis=1)


def embed_planes(planes, channel_ids, params, cfg):
    """Channel-wise tokens for already-selected planes.

    ``planes`` is ``[B, H, W, k]`` and ``channel_ids`` ``[B, k]`` holds the
    dataset index of each plane, used to look up its channel embedding.
    """
    planes = np.asarray(planes)
    b, h, w, k = planes.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"view {h}x{w} is not divisible by patch size {p}")
    ids = np.asarray(channel_ids, dtype=np.int64).reshape(b, k)
    grid = (h // p, w // p)
    n = grid[0] * grid[1]
    patches = Tensor(extract_patches(planes, p))  # [B, k, N, P*P]
    emb = nk.matmul(patches, params["patch_proj_cw.w"]) + params["patch_proj_cw.b"]
    emb = emb + pos_embed_for(params, cfg, grid)
    ce = nk.reshape(nk.take_rows(params["chan_embed"], ids), (b, k, 1, cfg.dim))
    emb = nk.reshape(emb + ce, (b, k * n, cfg.dim))
    layout = TokenLayout(True, n, grid, ids)
    return TokenSequence(_with_cls(emb, params), layout)


def _check_ids(ids, n_img_channels, cfg):
    if ids.shape[-1] == 0:
        raise ValueError("channel_ids must be non-empty")
    if np.any(ids < 0) or np.any(ids >= min(cfg.max_channels, n_img_channels)):
        raise ValueError(
            f"channel id out of range for image with {n_img_channels} channels and max_channels={cfg.max_channels}"
        )
    srt = np.sort(ids, axis=-1)
    if np.any(srt[..., 1:] == srt[..., :-1]):
        raise ValueError("duplicate channel id")


def select_planes(pixels, channel_ids):
    """Gather planes ``[B, H, W, k]`` for per-image ids ``[B, k]``."""
    b = pixels.shape[0]
    ids = np.asarray(channel_ids, dtype=np.int64).reshape(b, -1)
    return np.take_along_axis(pixels, ids[:, None, None, :], axis=3), ids


def patchify_channelwise(pixels, channel_ids, params, cfg):
    """Patchify each selected channel with the shared projection and concatenate.

    ``channel_ids`` is a flat list shared by the whole batch or a ``[B, k]``
    array of per-image selections. Token order is channel-major, following
    the order given.
    """
    pixels, _ = _as_batch(pixels)
    b, c = pixels.shape[0], pixels.shape[3]
    ids = np.asarray(channel_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = np.broadcast_to(ids, (b, ids.shape[0]))
    _check_ids(ids, c, cfg)
    planes, ids = select_planes(pixels, ids)
    return embed_planes(planes, ids, params, cfg)


def patchify_standard(pixels, params, cfg):
    """Fused projection of all channels per patch, as in a plain ViT."""
    pixels, _ = _as_batch(pixels)
    b, h, w, c = pixels.shape
    if "patch_proj_std.w" not in params:
        raise ConfigError("model has no fused patch projection")
    if c != cfg.in_chans:
        raise ConfigError(f"image has {c} channels but the fused projection expects {cfg.in_chans}")
    p = cfg.patch_size
    grid = (h // p, w // p)
    n = grid[0] * grid[1]
    x = pixels.reshape(b, grid[0], p, grid[1], p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, n, p * p * c)
    emb = nk.matmul(Tensor(x), params["patch_proj_std.w"]) + params["patch_proj_std.b"]
    emb = emb + pos_embed_for(params, cfg, grid)
    return TokenSequence(_with_cls(emb, params), TokenLayout(True, n, grid, None))


def patchify(pixels, params, cfg, channel_ids=None):
    """Dispatch on ``cfg.patchify``; channel-wise defaults to all channels."""
    if cfg.patchify == "standard":
        return patchify_standard(pixels, params, cfg)
    pixels, _ = _as_batch(pixels)
    if channel_ids is None:
        channel_ids = np.arange(pixels.shape[3])
    return patchify_channelwise(pixels, channel_ids, params, cfg)


# -- encoder ------------------------------------------------------------------
def _attention(x, params, pre, cfg, capture):
    b, l, d = x.shape
    h = cfg.heads
    dh = d // h
    qkv = nk.linear(x, params[pre + "qkv.w"], params[pre + "qkv.b"])
    qkv = nk.transpose(nk.reshape(qkv, (b, l, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nk.matmul(q, nk.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = nk.softmax(scores, axis=-1)
    out = nk.matmul(attn, v)  # [B, h, L, dh]
    out = nk.reshape(nk.transpose(out, (0, 2, 1, 3)), (b, l, d))
    out = nk.linear(out, params[pre + "proj.w"], params[pre + "proj.b"])
    return out, (attn.data.copy() if capture else None)


def encode(tokens, params, cfg, capture_attention=False):
    """Pre-norm transformer stack; returns the final CLS and patch features."""
    x = tokens.tokens if isinstance(tokens, TokenSequence) else tokens
    if x.shape[-1] != cfg.dim:
        raise ConfigError(f"token width {x.shape[-1]} != model dim {cfg.dim}")
    record = [] if capture_attention else None
    eps = cfg.ln_eps
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        a, att = _attention(
            nk.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], eps), params, pre + "attn.", cfg,
            capture_attention,
        )
        x = x + a
        hdn = nk.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], eps)
        hdn = nk.gelu(nk.linear(hdn, params[pre + "mlp.fc1.w"], params[pre + "mlp.fc1.b"]))
        x = x + nk.linear(hdn, params[pre + "mlp.fc2.w"], params[pre + "mlp.fc2.b"])
        if record is not None:
            record.append(att)
    x = nk.layer_norm(x, params["norm.g"], params["norm.b"], eps)
    return EncoderOutput(x[:, 0], x[:, 1:], record)


def classify(cls_feature, params):
    return nk.linear(cls_feature, params["head.w"], params["head.b"])


def forward_logits(pixels, params, cfg, channel_ids=None):
    return classify(encode(patchify(pixels, params, cfg, channel_ids), params, cfg).cls, params)


def attention_rollout(record, layout):
    """Final-layer, head-averaged CLS-to-patch attention as per-channel maps.

    Each layer entry is ``[heads, L, L]`` for one image (returns
    ``[k, gh, gw]``) or ``[B, heads, L, L]`` for a batch (returns
    ``[B, k, gh, gw]``).
    """
    if not layout.has_cls:
        raise ContractError("attention_rollout needs a CLS token")
    if not record:
        raise ContractError("empty attention record")
    last = np.asarray(record[-1])
    single = last.ndim == 3
    if single:
        last = last[None]
    row = last.mean(axis=1)[:, 0, 1:]  # [B, L-1]
    gh, gw = layout.grid
    k = row.shape[1] // layout.n_patches
    maps = row.reshape(row.shape[0], k, gh, gw)
    return maps[0] if single else maps


def count_params(params, names=None):
    names = params if names is None else names
    return int(sum(params[n].size for n in names))
