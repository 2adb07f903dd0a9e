"""Row-wise numeric kernels used by the autodiff ops and the metrics.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same signature. The numba path is used when numba imports
and ``ICDT_DISABLE_NUMBA`` is unset (or ``0``). Both paths accumulate row
statistics in float64 and loop in a fixed order, so each is bit-reproducible
on its own; the two paths agree to ~1e-6 relative.

All row kernels take a C-contiguous 2-D array ``(rows, width)``. The
elementwise activations have a single numpy implementation: numpy's
vectorized ``exp`` is faster than a scalar numba loop for them.
"""
from __future__ import annotations

import math
import os

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)

_disabled = os.environ.get("ICDT_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by ICDT_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# --------------------------------------------------------------------------
# pure-numpy path
# --------------------------------------------------------------------------

def np_layernorm_fwd(x, eps):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return ((x64 - mu) * rstd).astype(x.dtype), rstd[:, 0].astype(x.dtype)


def np_layernorm_bwd(g, xhat, rstd):
    g64 = g.astype(np.float64)
    xh = xhat.astype(np.float64)
    mg = g64.mean(axis=1, keepdims=True)
    mgx = (g64 * xh).mean(axis=1, keepdims=True)
    dx = rstd.astype(np.float64)[:, None] * (g64 - mg - xh * mgx)
    return dx.astype(g.dtype)


def np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z.astype(np.float64))
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)


def np_softmax_bwd(g, p):
    g64 = g.astype(np.float64)
    p64 = p.astype(np.float64)
    dot = (g64 * p64).sum(axis=1, keepdims=True)
    return (p64 * (g64 - dot)).astype(g.dtype)


def gelu_fwd(x):
    # 0.5·x·(1 + tanh u) == x − x / (e^{2u} + 1); numpy's exp is SIMD, tanh is not
    u = x * (_GELU_C + _GELU_C * 0.044715 * x * x)
    with np.errstate(over="ignore"):
        return x - x / (np.exp(2 * u) + 1)


def gelu_bwd(g, x):
    x2 = x * x
    u = x * (_GELU_C + _GELU_C * 0.044715 * x2)
    with np.errstate(over="ignore"):
        th = 1 - 2 / (np.exp(2 * u) + 1)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def silu_fwd(x):
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def silu_bwd(g, x):
    with np.errstate(over="ignore"):
        sg = 1.0 / (1.0 + np.exp(-x))
    return g * sg * (1.0 + x * (1.0 - sg))


def np_block_eme(img, block):
    """Sum over non-overlapping blocks of log(max/min); zero-min blocks add 0."""
    h, w = img.shape
    k2, k1 = h // block, w // block
    v = img[: k2 * block, : k1 * block].reshape(k2, block, k1, block)
    mx = v.max(axis=(1, 3)).astype(np.float64)
    mn = v.min(axis=(1, 3)).astype(np.float64)
    ok = (mn > 0) & (mx > 0)
    ratio = np.where(ok, mx / np.where(ok, mn, 1.0), 1.0)
    return float(np.log(ratio).sum())


def np_block_amee(img, block):
    """Sum over blocks of r*log(r), r = (max-min)/(max+min) taken over all channels."""
    h, w = img.shape[:2]
    k2, k1 = h // block, w // block
    v = img[: k2 * block, : k1 * block].reshape(k2, block, k1, block, -1)
    mx = v.max(axis=(1, 3, 4)).astype(np.float64)
    mn = v.min(axis=(1, 3, 4)).astype(np.float64)
    top = mx - mn
    bot = mx + mn
    ok = (top != 0) & (bot != 0)
    r = np.where(ok, top / np.where(ok, bot, 1.0), 1.0)
    return float((r * np.log(r)).sum())


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def nb_layernorm_fwd(x, eps):
        n, d = x.shape
        y = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mu = s / d
            v = 0.0
            for j in range(d):
                c = x[i, j] - mu
                v += c * c
            r = 1.0 / math.sqrt(v / d + eps)
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * r
            rstd[i] = r
        return y, rstd

    @njit(cache=True)
    def nb_layernorm_bwd(g, xhat, rstd):
        n, d = g.shape
        dx = np.empty_like(g)
        for i in range(n):
            mg = 0.0
            mgx = 0.0
            for j in range(d):
                mg += g[i, j]
                mgx += g[i, j] * xhat[i, j]
            mg /= d
            mgx /= d
            r = float(rstd[i])
            for j in range(d):
                dx[i, j] = r * (g[i, j] - mg - xhat[i, j] * mgx)
        return dx

    @njit(cache=True)
    def nb_softmax_fwd(x):
        n, d = x.shape
        p = np.empty_like(x)
        tmp = np.empty(d, dtype=np.float64)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(float(x[i, j] - m))
                tmp[j] = e
                s += e
            for j in range(d):
                p[i, j] = tmp[j] / s
        return p

    @njit(cache=True)
    def nb_softmax_bwd(g, p):
        n, d = g.shape
        dx = np.empty_like(g)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += float(g[i, j]) * float(p[i, j])
            for j in range(d):
                dx[i, j] = p[i, j] * (g[i, j] - dot)
        return dx

    @njit(cache=True)
    def _nb_block_eme(img, block):
        h, w = img.shape
        total = 0.0
        for bi in range(h // block):
            for bj in range(w // block):
                mx = -np.inf
                mn = np.inf
                for i in range(bi * block, (bi + 1) * block):
                    for j in range(bj * block, (bj + 1) * block):
                        v = img[i, j]
                        if v > mx:
                            mx = v
                        if v < mn:
                            mn = v
                if mn > 0 and mx > 0:
                    total += math.log(mx / mn)
        return total

    @njit(cache=True)
    def _nb_block_amee(img, block):
        h, w, c = img.shape
        total = 0.0
        for bi in range(h // block):
            for bj in range(w // block):
                mx = -np.inf
                mn = np.inf
                for i in range(bi * block, (bi + 1) * block):
                    for j in range(bj * block, (bj + 1) * block):
                        for k in range(c):
                            v = img[i, j, k]
                            if v > mx:
                                mx = v
                            if v < mn:
                                mn = v
                top = mx - mn
                bot = mx + mn
                if top != 0 and bot != 0:
                    r = top / bot
                    total += r * math.log(r)
        return total

    def nb_block_eme(img, block):
        return float(_nb_block_eme(np.ascontiguousarray(img, dtype=np.float64), block))

    def nb_block_amee(img, block):
        return float(_nb_block_amee(np.ascontiguousarray(img, dtype=np.float64), block))


def _pick(name):
    if HAS_NUMBA:
        return globals()["nb_" + name]
    return globals()["np_" + name]


layernorm_fwd = _pick("layernorm_fwd")
layernorm_bwd = _pick("layernorm_bwd")
softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
block_eme = _pick("block_eme")
block_amee = _pick("block_amee")

BACKEND = "numba" if HAS_NUMBA else "numpy"
