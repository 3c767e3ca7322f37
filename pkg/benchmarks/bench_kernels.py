"""Compare the numpy and numba row kernels, then time a full training step
under each ICVIT_NUMBA setting (each in a fresh interpreter, since the backend
is fixed at import).

    python3 benchmarks/bench_kernels.py [--rows 8256] [--dim 32] [--repeat 30]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _median_ms(fn, repeat):
    fn()  # compile / warm caches
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(ts))


def bench_kernels(rows, dim, repeat):
    from icvit.numkernel import _numba_kernels as nb
    from icvit.numkernel import _numpy_kernels as npk

    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, dim)).astype(np.float32)
    g = rng.standard_normal((rows, dim)).astype(np.float32)
    gamma = np.ones(dim, np.float32)
    beta = np.zeros(dim, np.float32)
    attn = rng.standard_normal((rows, 129)).astype(np.float32)
    gattn = rng.standard_normal((rows, 129)).astype(np.float32)
    out = []
    for name, mod in (("numpy", npk), ("numba", nb)):
        y, xh, rs = mod.layernorm_fwd(x, gamma, beta, 1e-6)
        s = mod.softmax_fwd(attn)
        cases = {
            "softmax_fwd": lambda: mod.softmax_fwd(attn),
            "softmax_bwd": lambda: mod.softmax_bwd(s, gattn),
            "layernorm_fwd": lambda: mod.layernorm_fwd(x, gamma, beta, 1e-6),
            "layernorm_bwd": lambda: mod.layernorm_bwd(g, xh, rs, gamma),
            "gelu_fwd": lambda: mod.gelu_fwd(x),
            "gelu_bwd": lambda: mod.gelu_bwd(x, g),
        }
        for kname, fn in cases.items():
            out.append({"backend": name, "kernel": kname, "ms": _median_ms(fn, repeat)})
    return out


_STEP = """
import time, json, numpy as np
from icvit import numkernel as nk, vit, trainer
from icvit.data import SyntheticSpec, generate_synthetic, make_batches
from icvit.sampling import SamplingStrategy
ds = generate_synthetic(SyntheticSpec(n_train=128, n_val=0, n_test=0), 0)["train"].normalized()
cfg = vit.ViTConfig(); tc = trainer.TrainConfig()
params = vit.init_params(cfg, 0)
st = trainer.TrainerState(optimizer=nk.AdamWState.zeros_like(params))
batches = list(make_batches(ds, 64, SamplingStrategy.parse("full"), nk.make_rng(0, "b", 0), drop_last=True))
ts = []
for i in range(12):
    t0 = time.perf_counter()
    trainer.finetune_step(batches[i % len(batches)], params, st, cfg, 1e-4, tc)
    ts.append((time.perf_counter() - t0) * 1e3)
print(json.dumps({"backend": nk.backend, "step_ms": float(np.median(ts[2:]))}))
"""


def bench_step(mode):
    env = dict(os.environ, ICVIT_NUMBA=mode)
    res = subprocess.run([sys.executable, "-c", _STEP], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=64 * 129)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end step timing")
    args = ap.parse_args(argv)

    rows = bench_kernels(args.rows, args.dim, args.repeat)
    print(f"{'kernel':15s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    by = {(r["backend"], r["kernel"]): r["ms"] for r in rows}
    for k in dict.fromkeys(r["kernel"] for r in rows):
        a, b = by[("numpy", k)], by[("numba", k)]
        print(f"{k:15s} {a:10.3f} {b:10.3f} {a / b:8.2f}")
    if not args.no_step:
        print()
        for mode in ("0", "auto", "1"):
            r = bench_step(mode)
            print(f"ICVIT_NUMBA={mode:4s} backend={r['backend']:12s} full step {r['step_ms']:.1f} ms")


if __name__ == "__main__":
    main()
