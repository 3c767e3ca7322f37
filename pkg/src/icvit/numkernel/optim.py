"""AdamW with decoupled weight decay, plus gradient clipping."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params):
        return cls(
            0,
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def decay_mask(params):
    """Names that receive weight decay: matrices only, not biases, norms or embeddings."""
    return {k: k.endswith(".w") for k in params}


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay=None):
    """One in-place AdamW update.

    ``params`` maps names to tensors, ``grads`` maps names to arrays (missing
    or ``None`` entries are treated as zero gradient). Decay is applied to the
    weights directly, never folded into the moments.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"adamw: moment shape {m.shape} != param shape {p.data.shape} for {name}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        wd = weight_decay if (decay is None or decay.get(name, True)) else 0.0
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return params, state


def clip_grad_norm(grads, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None)))
    if max_norm is not None and total > max_norm:
        s = max_norm / (total + 1e-6)
        for g in grads.values():
            if g is not None:
                g *= s
    return total
