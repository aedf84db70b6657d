"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

Backend selection, in order:

1. the ``DITHUB_BACKEND`` environment variable (``numba``, ``numpy``, or
   ``auto``), read once at import;
2. ``auto`` (the default) uses numba when it imports cleanly and falls back
   to numpy otherwise.

``set_backend`` switches at runtime (used by tests and the backend
benchmark).  Both backends compute the same quantities; results differ only
by floating-point summation order.
"""

from __future__ import annotations

import os

from dithub.kernels import _numpy

_impl = _numpy
_name = "numpy"


def set_backend(name: str) -> str:
    """Activate a backend by name; returns the name actually in effect."""
    global _impl, _name
    if name == "numpy":
        _impl, _name = _numpy, "numpy"
    elif name == "numba":
        from dithub.kernels import _numba

        _impl, _name = _numba, "numba"
    elif name == "auto":
        try:
            from dithub.kernels import _numba

            _impl, _name = _numba, "numba"
        except ImportError:
            _impl, _name = _numpy, "numpy"
    else:
        raise ValueError(f"unknown backend {name!r}; use 'numba', 'numpy', or 'auto'")
    return _name


def get_backend() -> str:
    return _name


def loss_grads_pairs(w, a, b, q, x, y):
    """Pair loss and factor gradients; see the active backend for semantics."""
    return _impl.loss_grads_pairs(w, a, b, q, x, y)


def base_loss_grads(w, q, x, y):
    return _impl.base_loss_grads(w, q, x, y)


def fnv1a64(data: bytes) -> int:
    return _impl.fnv1a64(data)


set_backend(os.environ.get("DITHUB_BACKEND", "auto"))
