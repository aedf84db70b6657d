import numpy as np
import pytest

from dithub import kernels
from dithub.kernels import _numpy
from dithub.rng import Rng

try:
    from dithub.kernels import _numba

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")


def _random_instance(seed, n=9, c=4, d=6, r=2):
    rng = Rng(seed)
    w = rng.normal((d, d))
    a = rng.normal((r, d), sigma=0.3)
    b = rng.normal((d, r), sigma=0.3)
    q = rng.normal((c, d))
    x = rng.normal((n, d))
    y = (rng.uniform((n, c)) < 0.4).astype(np.float64)
    return w, a, b, q, x, y


def test_fnv1a64_reference_vectors():
    assert _numpy.fnv1a64(b"") == 0xCBF29CE484222325
    assert _numpy.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert _numpy.fnv1a64(b"foobar") == 0x85944171F73967E8


@needs_numba
def test_fnv1a64_backends_agree():
    for payload in (b"", b"a", b"foobar", bytes(range(256)) * 7):
        assert _numba.fnv1a64(payload) == _numpy.fnv1a64(payload)


@needs_numba
def test_loss_grads_backends_agree():
    for seed in range(5):
        w, a, b, q, x, y = _random_instance(seed)
        loss_np, ga_np, gb_np = _numpy.loss_grads_pairs(w, a, b, q, x, y)
        loss_nb, ga_nb, gb_nb = _numba.loss_grads_pairs(w, a, b, q, x, y)
        assert loss_np == pytest.approx(loss_nb, rel=1e-12)
        np.testing.assert_allclose(ga_np, ga_nb, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(gb_np, gb_nb, rtol=1e-10, atol=1e-12)


@needs_numba
def test_base_loss_grads_backends_agree():
    for seed in range(5):
        w, _, _, q, x, y = _random_instance(seed)
        loss_np, gw_np = _numpy.base_loss_grads(w, q, x, y)
        loss_nb, gw_nb = _numba.base_loss_grads(w, q, x, y)
        assert loss_np == pytest.approx(loss_nb, rel=1e-12)
        np.testing.assert_allclose(gw_np, gw_nb, rtol=1e-10, atol=1e-12)


def test_loss_is_stable_for_extreme_scores():
    d, r, c, n = 4, 1, 1, 1
    w = np.zeros((d, d))
    a = np.full((r, d), 100.0)
    b = np.full((d, r), 100.0)
    q = np.ones((c, d))
    x = np.ones((n, d))
    y = np.ones((n, c))
    loss, ga, gb = _numpy.loss_grads_pairs(w, a, b, q, x, y)
    assert np.isfinite(loss)
    assert np.all(np.isfinite(ga)) and np.all(np.isfinite(gb))


def test_set_backend_roundtrip():
    original = kernels.get_backend()
    try:
        assert kernels.set_backend("numpy") == "numpy"
        w, a, b, q, x, y = _random_instance(99)
        loss, _, _ = kernels.loss_grads_pairs(w, a, b, q, x, y)
        assert np.isfinite(loss)
        with pytest.raises(ValueError):
            kernels.set_backend("fortran")
    finally:
        kernels.set_backend(original)


def test_auto_backend_resolves():
    original = kernels.get_backend()
    try:
        resolved = kernels.set_backend("auto")
        assert resolved in ("numba", "numpy")
    finally:
        kernels.set_backend(original)
