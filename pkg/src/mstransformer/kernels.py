"""Compiled windowed-attention kernel.

Each of the ``G`` attention rows-blocks ``(N, Dh)`` has its own radius ``r``;
query ``j`` attends to keys ``max(0, j-r) .. min(N-1, j+r)``. A radius of at
least ``N - 1`` gives full attention. Window weights are stored compactly as
``(G, N, W)`` with slot ``c`` holding key ``max(0, j-r) + c``. Logits,
softmax and all accumulations run in float64.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _forward(q, k, v, rad, scale, out, attn):
    g_count, n, dh = q.shape
    for g in range(g_count):
        r = rad[g]
        for j in range(n):
            lo = max(0, j - r)
            hi = min(n - 1, j + r)
            m = -np.inf
            for t in range(lo, hi + 1):
                s = 0.0
                for d in range(dh):
                    s += np.float64(q[g, j, d]) * np.float64(k[g, t, d])
                s *= scale
                attn[g, j, t - lo] = s
                if s > m:
                    m = s
            total = 0.0
            for t in range(lo, hi + 1):
                e = np.exp(attn[g, j, t - lo] - m)
                attn[g, j, t - lo] = e
                total += e
            for t in range(lo, hi + 1):
                attn[g, j, t - lo] /= total
            for d in range(dh):
                acc = 0.0
                for t in range(lo, hi + 1):
                    acc += attn[g, j, t - lo] * np.float64(v[g, t, d])
                out[g, j, d] = acc


@njit(cache=True)
def _backward(q, k, v, rad, scale, attn, gout, gq, gk, gv):
    g_count, n, dh = q.shape
    buf = np.empty(attn.shape[2])
    for g in range(g_count):
        r = rad[g]
        for j in range(n):
            lo = max(0, j - r)
            hi = min(n - 1, j + r)
            dot = 0.0
            for t in range(lo, hi + 1):
                ga = 0.0
                for d in range(dh):
                    ga += np.float64(gout[g, j, d]) * np.float64(v[g, t, d])
                buf[t - lo] = ga
                dot += attn[g, j, t - lo] * ga
            for t in range(lo, hi + 1):
                a = attn[g, j, t - lo]
                gl = a * (buf[t - lo] - dot) * scale
                for d in range(dh):
                    gq[g, j, d] += gl * k[g, t, d]
                    gk[g, t, d] += gl * q[g, j, d]
                    gv[g, t, d] += a * gout[g, j, d]


def storage_width(radii: np.ndarray, n: int) -> int:
    return int(min(2 * int(radii.max()) + 1, n))


def window_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, radii: np.ndarray):
    """``q, k, v``: ``(G, N, Dh)``; ``radii``: ``(G,)``. Returns ``(out, attn)``."""
    g, n, dh = q.shape
    radii = np.ascontiguousarray(np.minimum(radii, n - 1), dtype=np.int64)
    attn = np.zeros((g, n, storage_width(radii, n)))
    out = np.empty((g, n, dh))
    _forward(np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v),
             radii, 1.0 / np.sqrt(dh), out, attn)
    return out.astype(q.dtype, copy=False), attn


def window_backward(q, k, v, radii, attn, gout):
    g, n, dh = q.shape
    radii = np.ascontiguousarray(np.minimum(radii, n - 1), dtype=np.int64)
    gq, gk, gv = (np.zeros((g, n, dh)) for _ in range(3))
    _backward(np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v),
              radii, 1.0 / np.sqrt(dh), attn, np.ascontiguousarray(gout), gq, gk, gv)
    return tuple(x.astype(q.dtype, copy=False) for x in (gq, gk, gv))


def window_to_dense(attn: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Scatter compact ``(G, N, W)`` weights into ``(G, N, N)`` maps."""
    g, n, w = attn.shape
    dense = np.zeros((g, n, n))
    rows = np.arange(n)
    for gi in range(g):
        lo = np.maximum(0, rows - min(int(radii[gi]), n - 1))
        for c in range(w):
            cols = lo + c
            ok = cols < n
            dense[gi, rows[ok], cols[ok]] = attn[gi, rows[ok], c]
    return dense
