"""Backend selection for the row kernels.

``ICVIT_NUMBA`` picks the implementation:

* ``0`` -- pure numpy for every kernel;
* ``1`` -- numba for every kernel;
* unset / ``auto`` -- numba only where it measured faster (layer norm and
  the softmax backward pass); kernels built on ``exp``/``tanh`` stay on
  numpy's SIMD ufuncs.

``benchmarks/bench_kernels.py`` regenerates the comparison.
"""

import os

from . import _numpy_kernels

_mode = os.environ.get("ICVIT_NUMBA", "auto").strip().lower()
_NUMBA_IN_AUTO = {"layernorm_fwd", "layernorm_bwd", "softmax_bwd"}
_NAMES = ("softmax_fwd", "softmax_bwd", "layernorm_fwd", "layernorm_bwd", "gelu_fwd", "gelu_bwd")

try:
    if _mode in ("0", "false", "no", "off", "numpy"):
        raise ImportError
    from . import _numba_kernels
except ImportError:
    _numba_kernels = None

table = {}
for _name in _NAMES:
    use_numba = _numba_kernels is not None and (_mode in ("1", "true", "yes", "on", "numba") or _name in _NUMBA_IN_AUTO)
    table[_name] = "numba" if use_numba else "numpy"

backend = "+".join(sorted(set(table.values())))


def _pick(name):
    return getattr(_numba_kernels if table[name] == "numba" else _numpy_kernels, name)


softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
layernorm_fwd = _pick("layernorm_fwd")
layernorm_bwd = _pick("layernorm_bwd")
gelu_fwd = _pick("gelu_fwd")
gelu_bwd = _pick("gelu_bwd")
