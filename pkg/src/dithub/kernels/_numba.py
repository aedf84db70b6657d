"""Numba-jitted kernel implementations (default backend when numba imports).

The loss kernels keep the matmul-shaped work in ``np.dot`` (which numba routes
to BLAS) and fuse the elementwise sigmoid/loss/residual pass into one loop
with no temporaries; the byte-sequential FNV hash is where the JIT pays off
most.  First calls pay a compile cost that is cached on disk (``cache=True``).
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _pair_residuals(s, y):
    """Fused stable sigmoid + BCE: returns (loss_sum, residual matrix)."""
    n, cnum = s.shape
    g = np.empty((n, cnum))
    loss = 0.0
    for i in range(n):
        for c in range(cnum):
            v = s[i, c]
            if v >= 0.0:
                e = np.exp(-v)
                loss += np.log1p(e) + v - v * y[i, c]
                g[i, c] = 1.0 / (1.0 + e) - y[i, c]
            else:
                e = np.exp(v)
                loss += np.log1p(e) - v * y[i, c]
                g[i, c] = e / (1.0 + e) - y[i, c]
    return loss, g


@njit(cache=True)
def _loss_grads_pairs(w, a, b, q, x, y):
    wp = w + np.dot(b, a)
    xw = np.dot(x, np.ascontiguousarray(wp.T))     # (n, d)
    s = np.dot(xw, np.ascontiguousarray(q.T))      # (n, classes)
    loss, g = _pair_residuals(s, y)
    coef = np.dot(g, q)                            # (n, d)
    m = np.dot(np.ascontiguousarray(coef.T), x)    # (d, d)
    ga = np.dot(np.ascontiguousarray(b.T), m)
    gb = np.dot(m, np.ascontiguousarray(a.T))
    return loss, ga, gb


@njit(cache=True)
def _base_loss_grads(w, q, x, y):
    xw = np.dot(x, np.ascontiguousarray(w.T))
    s = np.dot(xw, np.ascontiguousarray(q.T))
    loss, g = _pair_residuals(s, y)
    coef = np.dot(g, q)
    gw = np.dot(np.ascontiguousarray(coef.T), x)
    return loss, gw


@njit(cache=True)
def _fnv1a64(buf):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for i in range(buf.size):
        h = (h ^ np.uint64(buf[i])) * prime
    return h


def loss_grads_pairs(w, a, b, q, x, y):
    loss, ga, gb = _loss_grads_pairs(
        np.ascontiguousarray(w),
        np.ascontiguousarray(a),
        np.ascontiguousarray(b),
        np.ascontiguousarray(q),
        np.ascontiguousarray(x),
        np.ascontiguousarray(y),
    )
    return float(loss), ga, gb


def base_loss_grads(w, q, x, y):
    loss, gw = _base_loss_grads(
        np.ascontiguousarray(w),
        np.ascontiguousarray(q),
        np.ascontiguousarray(x),
        np.ascontiguousarray(y),
    )
    return float(loss), gw


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a64(np.frombuffer(data, dtype=np.uint8)))
