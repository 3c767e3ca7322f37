"""Supervised multi-channel fine-tuning and from-scratch training."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkernel as nk
from . import vit
from .data.batching import make_batches
from .errors import ConfigError, LoadError, NumericalError
from .sampling import ChannelMask, SamplingStrategy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_epochs: int = 2
    weight_decay: float = 0.05
    strategy: str = "full"
    seed: int = 0
    clip_grad: float = 1.0
    eval_batch_size: int = 250

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        SamplingStrategy.parse(self.strategy)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainerState:
    step: int = 0
    epoch: int = 0
    best_val_acc: float = -1.0
    best_epoch: int = -1
    optimizer: nk.AdamWState = field(default_factory=nk.AdamWState)


@dataclass
class EpochCheckpoint:
    epoch: int
    params: dict  # name -> np.ndarray snapshot
    val_acc: float


def lr_at(step, total_steps, warmup_steps, base_lr):
    """Linear warm-up from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def restore(params, snap):
    for k, arr in snap.items():
        params[k].data[...] = arr


def load_backbone(params, tensors, strict=True):
    """Copy backbone weights from a checkpoint into ``params``.

    Classifier and self-distillation heads are never copied; names of the
    parameters left at their fresh initialisation are returned.
    """
    fresh = []
    for name in params:
        if name.startswith(("head.", "dino_head.")):
            fresh.append(name)
            continue
        if name not in tensors:
            if strict:
                raise LoadError(f"checkpoint has no tensor {name!r}")
            fresh.append(name)
            continue
        src = tensors[name]
        if src.shape != params[name].shape:
            raise LoadError(f"tensor {name!r}: checkpoint shape {src.shape} != model shape {params[name].shape}")
        params[name].data[...] = src
    return fresh


def step_loss(params, cfg, batch_pixels, channel_ids, labels):
    if cfg.patchify == "standard":
        seq = vit.patchify_standard(batch_pixels, params, cfg)
    else:
        seq = vit.embed_planes(batch_pixels, channel_ids, params, cfg)
    logits = vit.classify(vit.encode(seq, params, cfg).cls, params)
    return nk.cross_entropy(logits, labels)


def finetune_step(batch, params, state, cfg, lr, tcfg, decay=None):
    """Forward, backward and one AdamW update; returns the batch loss."""
    for p in params.values():
        p.grad = None
    loss = step_loss(params, cfg, batch.pixels, batch.channel_ids, batch.labels)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss at step {state.step}")
    nk.backward(loss)
    grads = {k: p.grad for k, p in params.items()}
    if tcfg.clip_grad:
        nk.clip_grad_norm(grads, tcfg.clip_grad)
    nk.adamw_step(params, grads, state.optimizer, lr, weight_decay=tcfg.weight_decay,
                  decay=decay if decay is not None else nk.decay_mask(params))
    state.step += 1
    return value


def predict(params, cfg, dataset, mask=None, batch_size=250):
    """Top-1 predictions using the channels selected by ``mask`` (all by default)."""
    c = dataset.channels
    idx = list(range(c)) if mask is None else ChannelMask(tuple(mask.bits)).indices()
    if not idx:
        raise ValueError("evaluation mask selects no channels")
    preds = np.empty(len(dataset), dtype=np.int64)
    for lo in range(0, len(dataset), batch_size):
        px = dataset.pixels[lo : lo + batch_size]
        if cfg.patchify == "standard":
            if mask is not None and len(idx) != c:
                px = px * np.asarray(mask.bits, dtype=px.dtype)
            logits = vit.forward_logits(px, params, cfg)
        else:
            logits = vit.forward_logits(px, params, cfg, channel_ids=idx)
        preds[lo : lo + batch_size] = logits.data.argmax(axis=1)
    return preds


def evaluate(params, cfg, dataset, mask=None, batch_size=250):
    """Top-1 accuracy in [0, 1]."""
    if len(dataset) == 0:
        return 0.0
    return float((predict(params, cfg, dataset, mask, batch_size) == dataset.labels).mean())


def select_best(checkpoints, val_dataset=None, params=None, cfg=None):
    """Highest validation accuracy; ties go to the earlier epoch.

    Uses each checkpoint's recorded ``val_acc`` unless it is ``None``, in
    which case it is evaluated on ``val_dataset``.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    best = None
    for ck in sorted(checkpoints, key=lambda c: c.epoch):
        acc = ck.val_acc
        if acc is None:
            restore(params, ck.params)
            acc = evaluate(params, cfg, val_dataset)
            ck.val_acc = acc
        if best is None or acc > best.val_acc:
            best = ck
    return best


@dataclass
class FitResult:
    params: dict
    best_epoch: int
    best_val_acc: float
    test_acc: float | None
    history: list


def fit(cfg, tcfg, train, val, test=None, init=None, log_path=None, on_epoch=None):
    """Train a classifier, keep the best-validation epoch, report its test accuracy.

    ``init`` is an optional mapping of pretrained backbone tensors; every
    other setting is identical between the pretrained and scratch runs.
    """
    params = vit.init_params(cfg, seed=tcfg.seed)
    fresh = None
    if init is not None:
        fresh = load_backbone(params, init)
        log.info("initialised backbone from checkpoint; fresh: %s", ", ".join(fresh))
    strategy = SamplingStrategy.parse(tcfg.strategy)
    steps_per_epoch = math.ceil(len(train) / tcfg.batch_size)
    total = steps_per_epoch * tcfg.epochs
    warm = steps_per_epoch * tcfg.warmup_epochs
    state = TrainerState(optimizer=nk.AdamWState.zeros_like(params))
    decay = nk.decay_mask(params)
    history, best = [], None
    logf = open(log_path, "a") if log_path else None
    last_beat = time.monotonic()
    try:
        for epoch in range(tcfg.epochs):
            rng = nk.make_rng(tcfg.seed, "finetune-batches", epoch)
            losses = []
            for batch in make_batches(train, tcfg.batch_size, strategy, rng):
                lr = lr_at(state.step, total, warm, tcfg.base_lr)
                losses.append(finetune_step(batch, params, state, cfg, lr, tcfg, decay))
                if time.monotonic() - last_beat > 10:
                    log.info("epoch %d step %d loss %.4f", epoch, state.step, losses[-1])
                    last_beat = time.monotonic()
            val_acc = evaluate(params, cfg, val, batch_size=tcfg.eval_batch_size)
            ck = EpochCheckpoint(epoch, snapshot(params), val_acc)
            if best is None or val_acc > best.val_acc:
                best = ck
            state.epoch = epoch + 1
            rec = {"epoch": epoch, "step": state.step, "train_loss": float(np.mean(losses)), "val_acc": val_acc,
                   "lr": lr_at(state.step, total, warm, tcfg.base_lr)}
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if on_epoch:
                on_epoch(rec)
    finally:
        if logf:
            logf.close()
    restore(params, best.params)
    state.best_val_acc, state.best_epoch = best.val_acc, best.epoch
    test_acc = evaluate(params, cfg, test, batch_size=tcfg.eval_batch_size) if test is not None else None
    return FitResult(params, best.epoch, best.val_acc, test_acc, history)


def state_tensors(params, state):
    """Flatten parameters and optimiser moments into checkpoint tensors plus metadata."""
    out = {k: p.data for k, p in params.items()}
    for k in params:
        out[f"opt.m.{k}"] = state.optimizer.m[k]
        out[f"opt.v.{k}"] = state.optimizer.v[k]
    meta = {"step": state.step, "epoch": state.epoch, "best_val_acc": state.best_val_acc,
            "best_epoch": state.best_epoch, "opt_step": state.optimizer.step}
    return out, meta


def state_from_tensors(tensors, meta):
    """Inverse of :func:`state_tensors`; returns ``(params, TrainerState)``."""
    names = [k for k in tensors if not k.startswith("opt.")]
    try:
        m = {k: tensors[f"opt.m.{k}"].copy() for k in names}
        v = {k: tensors[f"opt.v.{k}"].copy() for k in names}
    except KeyError as e:
        raise LoadError(f"checkpoint has no optimiser moment {e.args[0]!r}") from None
    params = {k: nk.parameter(tensors[k].copy()) for k in names}
    opt = nk.AdamWState(int(meta["opt_step"]), m, v)
    state = TrainerState(int(meta["step"]), int(meta["epoch"]), float(meta["best_val_acc"]), int(meta["best_epoch"]),
                         opt)
    return params, state


def clone_params(params):
    return {k: nk.parameter(p.data.copy()) for k, p in params.items()}


def deepcopy_state(state):
    return copy.deepcopy(state)
