"""Pure-numpy kernel implementations (fallback backend).

Vectorized with BLAS matmuls; semantics match the numba backend up to
floating-point summation order.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _stable_sigmoid_and_bce(s: np.ndarray, y: np.ndarray):
    e = np.exp(-np.abs(s))
    sig = np.where(s >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    bce = np.log1p(e) + np.maximum(s, 0.0) - s * y
    return sig, bce


def loss_grads_pairs(w, a, b, q, x, y):
    """Summed logistic loss over all (sample, class) score pairs.

    Scores are q_c @ (w + b @ a) @ x_i; returns the loss summed over pairs and
    the exact gradients of that sum with respect to the two low-rank factors.
    """
    wp = w + b @ a
    s = (q @ wp) @ x.T            # (classes, samples)
    sig, bce = _stable_sigmoid_and_bce(s, y.T)
    g = sig - y.T
    m = q.T @ (g @ x)             # (d, d) accumulated residual outer products
    return float(np.sum(bce)), b.T @ m, m @ a.T


def base_loss_grads(w, q, x, y):
    """Same pair loss against the bare weight matrix; gradient w.r.t. w."""
    s = (q @ w) @ x.T
    sig, bce = _stable_sigmoid_and_bce(s, y.T)
    g = sig - y.T
    return float(np.sum(bce)), q.T @ (g @ x)


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash of a byte string."""
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h
