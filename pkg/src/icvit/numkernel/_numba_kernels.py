"""JIT-compiled row kernels; same signatures as ``_numpy_kernels``."""

import math

import numpy as np
from numba import njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


@njit(cache=True)
def softmax_fwd(x):
    rows, n = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = x[r, 0] * 0
        for j in range(n):
            e = np.exp(x[r, j] - m)
            out[r, j] = e
            s += e
        inv = 1 / s
        for j in range(n):
            out[r, j] *= inv
    return out


@njit(cache=True)
def softmax_bwd(y, gy):
    rows, n = y.shape
    out = np.empty_like(y)
    for r in range(rows):
        dot = y[r, 0] * 0
        for j in range(n):
            dot += gy[r, j] * y[r, j]
        for j in range(n):
            out[r, j] = y[r, j] * (gy[r, j] - dot)
    return out


@njit(cache=True)
def layernorm_fwd(x, gamma, beta, eps):
    rows, n = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[r, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[r, j] - mu
            var += d * d
        var /= n
        rs = 1.0 / math.sqrt(var + eps)
        rstd[r] = rs
        for j in range(n):
            h = (x[r, j] - mu) * rs
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def layernorm_bwd(gy, xhat, rstd, gamma):
    rows, n = gy.shape
    gx = np.empty_like(gy)
    gg = np.zeros(n, dtype=gy.dtype)
    gb = np.zeros(n, dtype=gy.dtype)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gh = gy[r, j] * gamma[j]
            m1 += gh
            m2 += gh * xhat[r, j]
            gg[j] += gy[r, j] * xhat[r, j]
            gb[j] += gy[r, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            gx[r, j] = (gy[r, j] * gamma[j] - m1 - xhat[r, j] * m2) * rstd[r]
    return gx, gg, gb


@njit(cache=True)
def gelu_fwd(x):
    rows, n = x.shape
    out = np.empty_like(x)
    one, half = x.dtype.type(1.0), x.dtype.type(0.5)
    c, k = x.dtype.type(GELU_C), x.dtype.type(GELU_K)
    for r in range(rows):
        for j in range(n):
            v = x[r, j]
            t = np.tanh(c * (v + k * v * v * v))
            out[r, j] = half * v * (one + t)
    return out


@njit(cache=True)
def gelu_bwd(x, gy):
    rows, n = x.shape
    out = np.empty_like(x)
    one, half, three = x.dtype.type(1.0), x.dtype.type(0.5), x.dtype.type(3.0)
    c, k = x.dtype.type(GELU_C), x.dtype.type(GELU_K)
    for r in range(rows):
        for j in range(n):
            v = x[r, j]
            t = np.tanh(c * (v + k * v * v * v))
            d = half * (one + t) + half * v * (one - t * t) * c * (one + three * k * v * v)
            out[r, j] = gy[r, j] * d
    return out
