"""Self-distillation pretraining on isolated channels.

A student backbone+head is trained to match a momentum-averaged teacher
across augmented views. Under isolated sampling each view holds one plane,
so every sequence is ``N + 1`` tokens long whatever the source channel
count.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkernel as nk
from . import vit
from .data.augment import add_noise, random_hflip, random_resized_crop
from .data.batching import Batch, make_batches
from .errors import ConfigError, ContractError, NumericalError
from .sampling import SamplingStrategy
from .trainer import lr_at

log = logging.getLogger(__name__)


@dataclass
class DinoConfig:
    out_dim: int = 256
    hidden_dim: int = 128
    bottleneck_dim: int = 32
    student_temp: float = 0.1
    warmup_teacher_temp: float = 0.04
    teacher_temp: float = 0.07
    warmup_teacher_temp_frac: float = 0.3
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    center_momentum: float = 0.9
    center_init: str = "batch"  # "batch": seed the centre with the first teacher batch mean; "zeros"
    n_global: int = 2
    n_local: int = 2
    local_size: int = 16
    global_scale: tuple = (0.7, 1.0)
    local_scale: tuple = (0.2, 0.5)
    view_noise: float = 0.1
    hflip: bool = True
    steps: int = 2000
    batch_size: int = 64
    base_lr: float = 5e-4
    warmup_steps: int = 200
    weight_decay: float = 0.04
    clip_grad: float = 3.0
    strategy: str = "isolated"
    seed: int = 0

    def __post_init__(self):
        self.global_scale = tuple(self.global_scale)
        self.local_scale = tuple(self.local_scale)
        if min(self.student_temp, self.teacher_temp, self.warmup_teacher_temp) <= 0:
            raise ConfigError("temperatures must be positive")
        if self.out_dim < 2:
            raise ConfigError("out_dim must be at least 2")
        if self.n_global < 1 or self.n_local < 0:
            raise ConfigError("need at least one global view")
        if self.center_init not in ("batch", "zeros"):
            raise ConfigError("center_init must be 'batch' or 'zeros'")
        SamplingStrategy.parse(self.strategy)

    def to_dict(self):
        return asdict(self)


@dataclass
class ViewSet:
    global_views: list  # each [B, H, W, k]
    local_views: list  # each [B, h, w, k]
    channel_ids: np.ndarray  # [B, k], shared by all views of an image


@dataclass
class DinoState:
    student: dict
    teacher: dict
    center: np.ndarray
    optimizer: nk.AdamWState
    step: int = 0
    history: list = field(default_factory=list)


# -- head ---------------------------------------------------------------------
def init_head(vcfg, dcfg, seed=0):
    rng = nk.make_rng(seed, "dino-head-init")
    dt = nk.get_dtype()
    dims = [vcfg.dim, dcfg.hidden_dim, dcfg.hidden_dim, dcfg.bottleneck_dim]
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"dino_head.mlp.{i}.w"] = nk.parameter(nk.trunc_normal(rng, (a, b), 0.02, dt))
        params[f"dino_head.mlp.{i}.b"] = nk.parameter(np.zeros(b, dt))
    params["dino_head.proto.w"] = nk.parameter(nk.trunc_normal(rng, (dcfg.bottleneck_dim, dcfg.out_dim), 0.02, dt))
    return params


def head_forward(features, params):
    """3-layer MLP, unit-normalised bottleneck, then cosine scores against unit-norm prototypes."""
    h = nk.gelu(nk.linear(features, params["dino_head.mlp.0.w"], params["dino_head.mlp.0.b"]))
    h = nk.gelu(nk.linear(h, params["dino_head.mlp.1.w"], params["dino_head.mlp.1.b"]))
    z = nk.l2_normalize(nk.linear(h, params["dino_head.mlp.2.w"], params["dino_head.mlp.2.b"]), axis=-1)
    protos = nk.l2_normalize(params["dino_head.proto.w"], axis=0)
    return nk.matmul(z, protos), z


# -- objective and teacher bookkeeping ----------------------------------------
def teacher_probs(teacher_logits, center, teacher_temp):
    z = (np.asarray(teacher_logits, dtype=np.float64) - center) / teacher_temp
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_loss(student_logits, teacher_logits, student_temp, teacher_temp, center):
    """Mean cross-entropy between sharpened teacher and student distributions.

    ``teacher_logits[i]`` is the teacher output on global view ``i`` and is
    paired with every student view except view ``i``. Teacher inputs are
    treated as constants.
    """
    if student_temp <= 0 or teacher_temp <= 0:
        raise ValueError("temperatures must be positive")
    total, terms = None, 0
    for iq, t in enumerate(teacher_logits):
        t = t.data if isinstance(t, nk.Tensor) else t
        q = nk.Tensor(teacher_probs(t, center, teacher_temp))
        for v, s in enumerate(student_logits):
            if v == iq:
                continue
            logp = nk.log_softmax(s * (1.0 / student_temp), axis=-1)
            term = nk.mean(nk.sum_(q * logp, axis=-1)) * -1.0
            total = term if total is None else total + term
            terms += 1
    if terms == 0:
        raise ValueError("dino_loss needs at least one (teacher, student) pair with distinct views")
    return total * (1.0 / terms)


def ema_update(teacher, student, m):
    """``teacher <- m * teacher + (1 - m) * student`` for every named tensor."""
    if set(teacher) != set(student):
        raise ContractError("teacher and student parameter trees differ")
    for k, t in teacher.items():
        s = student[k].data
        if t.data.shape != s.shape:
            raise ContractError(f"shape mismatch for {k}: {t.data.shape} vs {s.shape}")
        t.data *= m
        t.data += (1.0 - m) * s
    return teacher


def update_center(center, teacher_logits, center_momentum):
    batch_mean = np.asarray(teacher_logits, dtype=np.float64).reshape(-1, center.shape[-1]).mean(axis=0)
    return center_momentum * center + (1.0 - center_momentum) * batch_mean


def mean_distribution_entropy(teacher_logits, center, teacher_temp):
    """Entropy (nats) of the batch-averaged teacher distribution."""
    p = teacher_probs(teacher_logits, center, teacher_temp).reshape(-1, center.shape[-1]).mean(axis=0)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def teacher_temp_at(step, total_steps, dcfg):
    """Linear warm-up of the teacher temperature, then constant."""
    warm = int(dcfg.warmup_teacher_temp_frac * total_steps)
    if step >= warm:
        return dcfg.teacher_temp
    return dcfg.warmup_teacher_temp + (dcfg.teacher_temp - dcfg.warmup_teacher_temp) * step / warm


def momentum_at(step, total_steps, start, end):
    """Cosine ramp from ``start`` to ``end``."""
    if total_steps <= 0:
        return end
    frac = min(step / total_steps, 1.0)
    return end - (end - start) * (math.cos(math.pi * frac) + 1.0) / 2.0


# -- views --------------------------------------------------------------------
def make_views(planes, channel_ids, dcfg, rng):
    b, h, w, _ = planes.shape

    def aug(size, scale):
        v = random_resized_crop(planes, size, rng, scale=scale)
        if dcfg.hflip:
            v = random_hflip(v, rng)
        return add_noise(v, rng, dcfg.view_noise)

    return ViewSet(
        [aug(h, dcfg.global_scale) for _ in range(dcfg.n_global)],
        [aug(dcfg.local_size, dcfg.local_scale) for _ in range(dcfg.n_local)],
        np.asarray(channel_ids),
    )


def _tokens(views, ids, params, vcfg):
    stacked = np.concatenate(views, axis=0)
    if vcfg.patchify == "standard":
        return vit.patchify_standard(stacked, params, vcfg)
    return vit.embed_planes(stacked, np.tile(ids, (len(views), 1)), params, vcfg)


def _forward(views, ids, params, vcfg):
    out = vit.encode(_tokens(views, ids, params, vcfg), params, vcfg)
    logits, _ = head_forward(out.cls, params)
    b = views[0].shape[0]
    return [logits[i * b : (i + 1) * b] for i in range(len(views))]


# -- training -----------------------------------------------------------------
def init_state(vcfg, dcfg, seed=None):
    seed = dcfg.seed if seed is None else seed
    student = vit.init_params(vcfg, seed=seed, head=False)
    student.update(init_head(vcfg, dcfg, seed))
    teacher = {k: nk.Tensor(p.data.copy()) for k, p in student.items()}
    center = np.zeros(dcfg.out_dim)
    return DinoState(student, teacher, center, nk.AdamWState.zeros_like(student))


def pretrain_step(batch, state, vcfg, dcfg, rng, total_steps=None):
    """One student update, teacher EMA and centre update on a batch of selected planes.

    ``batch`` is a :class:`~icvit.data.batching.Batch`; its ``pixels`` are
    the planes chosen by the sampling strategy and ``channel_ids`` their
    dataset indices.
    """
    if len(batch.labels) == 0:
        raise ValueError("empty batch")
    total = total_steps or dcfg.steps
    lr = lr_at(state.step, total, min(dcfg.warmup_steps, total - 1), dcfg.base_lr)
    m = momentum_at(state.step, total, dcfg.momentum_start, dcfg.momentum_end)
    t_t = teacher_temp_at(state.step, total, dcfg)

    views = make_views(batch.pixels, batch.channel_ids, dcfg, rng)
    teacher_out = [t.data for t in _forward(views.global_views, views.channel_ids, state.teacher, vcfg)]
    if state.step == 0 and dcfg.center_init == "batch":
        # a zero centre leaves the near-identical outputs of a fresh network un-centred
        state.center = np.concatenate(teacher_out, axis=0).astype(np.float64).mean(axis=0)
    for p in state.student.values():
        p.grad = None
    student_out = _forward(views.global_views, views.channel_ids, state.student, vcfg)
    if views.local_views:
        student_out += _forward(views.local_views, views.channel_ids, state.student, vcfg)
    loss = dino_loss(student_out, teacher_out, dcfg.student_temp, t_t, state.center)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite self-distillation loss at step {state.step}")
    nk.backward(loss)
    grads = {k: p.grad for k, p in state.student.items()}
    if dcfg.clip_grad:
        nk.clip_grad_norm(grads, dcfg.clip_grad)
    nk.adamw_step(state.student, grads, state.optimizer, lr, weight_decay=dcfg.weight_decay,
                  decay=nk.decay_mask(state.student))
    ema_update(state.teacher, state.student, m)
    t_all = np.concatenate(teacher_out, axis=0)
    entropy = mean_distribution_entropy(t_all, state.center, t_t)
    state.center = update_center(state.center, t_all, dcfg.center_momentum)
    state.step += 1
    gh, gw = (s // vcfg.patch_size for s in views.global_views[0].shape[1:3])
    k = 1 if vcfg.patchify == "standard" else views.channel_ids.shape[1]
    return {"step": state.step - 1, "loss": value, "teacher_entropy": entropy, "lr": lr, "momentum": m,
            "teacher_temp": t_t, "seq_len": gh * gw * k + 1}


def pretrain(datasets, vcfg, dcfg, steps=None, log_path=None, state=None, on_step=None):
    """Run ``steps`` self-distillation updates, cycling through shuffled epochs."""
    steps = dcfg.steps if steps is None else steps
    state = state or init_state(vcfg, dcfg)
    strategy = SamplingStrategy.parse(dcfg.strategy)
    if vcfg.patchify == "standard" and strategy.variant != "full":
        raise ConfigError("a fused-projection model can only be pretrained on all channels")
    logf = open(log_path, "a") if log_path else None
    last_beat = time.monotonic()
    epoch = 0
    try:
        while state.step < steps:
            brng = nk.make_rng(dcfg.seed, "pretrain-batches", epoch)
            for batch in make_batches(datasets, dcfg.batch_size, strategy, brng, drop_last=True):
                if state.step >= steps:
                    break
                t0 = time.perf_counter()
                rec = pretrain_step(batch, state, vcfg, dcfg, nk.make_rng(dcfg.seed, "views", state.step), steps)
                rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
                state.history.append(rec)
                if logf:
                    logf.write(json.dumps({k: rec[k] for k in ("step", "loss", "teacher_entropy", "lr", "momentum",
                                                               "wall_ms")}) + "\n")
                if on_step:
                    on_step(rec)
                if time.monotonic() - last_beat > 10:
                    log.info("pretrain step %d loss %.4f entropy %.3f", rec["step"], rec["loss"], rec["teacher_entropy"])
                    last_beat = time.monotonic()
            epoch += 1
    finally:
        if logf:
            logf.close()
    return state


def backbone_tensors(state, which="teacher"):
    """Backbone arrays (no self-distillation head) from the teacher or student."""
    src = state.teacher if which == "teacher" else state.student
    return {k: t.data.copy() for k, t in src.items() if not k.startswith("dino_head.")}


def batch_from_planes(planes, channel_ids, labels=None):
    b = planes.shape[0]
    return Batch(planes, np.zeros(b, np.int64) if labels is None else labels, np.asarray(channel_ids).reshape(b, -1),
                 np.zeros(b, np.int64))
