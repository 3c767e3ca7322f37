"""Central finite-difference gradient checks."""

import numpy as np

from .tensor import backward


def relative_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _default_step(dtype, order):
    # eps^(1/(order+1)) balances truncation against round-off; a quarter of
    # it because LayerNorm over a near-zero residual stream makes the loss
    # curve sharply on a ~1e-2 scale at initialisation
    return 0.25 * float(np.finfo(dtype).eps ** (1.0 / (order + 1)))


def check_gradients(fn, params, probes=20, h=None, floor=1e-2, rng=None, order=4):
    """Compare analytic and central-difference gradients at random coordinates.

    ``fn`` maps the current ``params`` (name -> leaf tensor) to a scalar
    tensor. Returns the maximum relative error over the probes, with the
    denominator floored at ``floor`` so near-zero gradients are judged on an
    absolute scale, plus per-probe details.

    ``order`` 2 is the three-point stencil, 4 the five-point one. The
    five-point stencil tolerates a larger step, which keeps float32
    round-off in the loss from dominating small gradients.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    backward(fn(params))
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=float)
    worst = 0.0
    details = []
    for _ in range(probes):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[name]
        step = _default_step(p.data.dtype, order) if h is None else h
        idx = np.unravel_index(int(rng.integers(p.size)), p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx].copy()

        def f_at(delta):
            p.data[idx] = orig + delta
            return float(fn(params).data)

        if order == 2:
            numeric = (f_at(step) - f_at(-step)) / (2.0 * step)
        else:
            numeric = (8.0 * (f_at(step) - f_at(-step)) - (f_at(2 * step) - f_at(-2 * step))) / (12.0 * step)
        p.data[idx] = orig
        err = relative_error(analytic, numeric, floor)
        details.append((name, idx, analytic, numeric, err))
        worst = max(worst, err)
    return worst, details
