"""Compiled inner loops for the depthwise convolution.

Planes are copied into a zero-padded buffer and flattened, so every tap is
one contiguous run over ``H * Wp`` elements; the pad columns produce junk
that is dropped on the way out.
"""
from __future__ import annotations

import numpy as np
from numba import njit

@njit(cache=True, fastmath=True)
def depthwise_forward(x, w, d):
    B, C, H, W = x.shape
    k = w.shape[2]
    p = (k // 2) * d
    Hp, Wp = H + 2 * p, W + 2 * p
    L = H * Wp
    out = np.empty_like(x)
    buf = np.zeros(Hp * Wp + 2 * p, dtype=x.dtype)
    acc = np.empty(L, dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for yy in range(H):
                base = (yy + p) * Wp + p
                for xx in range(W):
                    buf[base + xx] = x[b, c, yy, xx]
            acc[:] = 0
            for i in range(k):
                for j in range(k):
                    wv = w[c, 0, i, j]
                    off = i * d * Wp + j * d
                    for n in range(L):
                        acc[n] += wv * buf[n + off]
            for yy in range(H):
                for xx in range(W):
                    out[b, c, yy, xx] = acc[yy * Wp + xx]
    return out


@njit(cache=True, fastmath=True)
def depthwise_weight_grad(x, g, k, d):
    """sum over batch and positions of g(p) * x(p + tap offset), per channel and tap."""
    B, C, H, W = x.shape
    p = (k // 2) * d
    Hp, Wp = H + 2 * p, W + 2 * p
    L = H * Wp
    gw = np.zeros((C, 1, k, k), dtype=np.float64)
    buf = np.zeros(Hp * Wp + 2 * p, dtype=x.dtype)
    gf = np.zeros(L, dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for yy in range(H):
                base = (yy + p) * Wp + p
                for xx in range(W):
                    buf[base + xx] = x[b, c, yy, xx]
                    gf[yy * Wp + xx] = g[b, c, yy, xx]
            for i in range(k):
                for j in range(k):
                    off = i * d * Wp + j * d
                    s = 0.0
                    for n in range(L):
                        s += gf[n] * buf[n + off]
                    gw[c, 0, i, j] += s
    return gw
