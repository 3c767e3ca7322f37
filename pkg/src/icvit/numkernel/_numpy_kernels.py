"""Reference row kernels in plain numpy.

All kernels take 2-D ``(rows, n)`` arrays and preserve dtype.
"""

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
GELU_K = 0.044715


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd(gy, xhat, rstd, gamma):
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * rstd[:, None]
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd(x):
    dt = x.dtype.type
    t = np.tanh(dt(GELU_C) * (x + dt(GELU_K) * x * x * x))
    return dt(0.5) * x * (dt(1.0) + t)


def gelu_bwd(x, gy):
    dt = x.dtype.type
    c, k = dt(GELU_C), dt(GELU_K)
    t = np.tanh(c * (x + k * x * x * x))
    d = dt(0.5) * (dt(1.0) + t) + dt(0.5) * x * (dt(1.0) - t * t) * c * (dt(1.0) + dt(3.0) * k * x * x)
    return gy * d
