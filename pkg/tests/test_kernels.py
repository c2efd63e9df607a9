import numpy as np
import pytest

from edgepro import _pykernels, kernels

try:
    from edgepro import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def _conv_reference(x, w, b):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = x[:, :, i:i + kh, j:j + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


@pytest.mark.parametrize("impl", [_pykernels, kernels])
def test_conv_forward_matches_direct_loops(impl):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2, 7, 6))
    w = rng.normal(size=(4, 2, 3, 2))
    b = rng.normal(size=4)
    np.testing.assert_allclose(impl.conv2d_forward(x, w, b), _conv_reference(x, w, b),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("impl", [_pykernels, kernels])
def test_conv_backward_is_adjoint(impl):
    # <gy, conv(x)> is bilinear, so its derivatives are exact dot products
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    b = np.zeros(2)
    gy = rng.normal(size=(2, 2, 4, 3))
    gx, gw, gb = impl.conv2d_backward(x, w, gy)
    dx = rng.normal(size=x.shape)
    dw = rng.normal(size=w.shape)
    lhs = np.sum(gy * impl.conv2d_forward(dx, w, b))
    assert np.isclose(lhs, np.sum(gx * dx), rtol=1e-12)
    lhs = np.sum(gy * impl.conv2d_forward(x, dw, b))
    assert np.isclose(lhs, np.sum(gw * dw), rtol=1e-12)
    np.testing.assert_allclose(gb, gy.sum(axis=(0, 2, 3)))


@pytest.mark.parametrize("impl", [_pykernels, kernels])
def test_maxpool_roundtrip(impl):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 4))
    y, arg = impl.maxpool2d_forward(x, 2, 2)
    expect = x.reshape(2, 3, 3, 2, 2, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(y, expect)
    gy = rng.normal(size=y.shape)
    gx = impl.maxpool2d_backward(gy, arg, x.shape)
    # each window routes its gradient to its maximum only
    assert np.isclose(gx.sum(), gy.sum())
    assert np.count_nonzero(gx) == gy.size


@pytest.mark.parametrize("impl", [_pykernels, kernels])
def test_maxpool_ties_pick_first(impl):
    x = np.zeros((1, 1, 2, 2))
    _, arg = impl.maxpool2d_forward(x, 2, 2)
    assert arg.ravel()[0] == 0


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    rng = np.random.default_rng(seed)
    n, c, o = rng.integers(1, 4, size=3)
    k = int(rng.integers(1, 4))
    h, wd = rng.integers(k, k + 6, size=2)
    x = rng.normal(size=(n, c, h, wd))
    w = rng.normal(size=(o, c, k, k))
    b = rng.normal(size=o)
    np.testing.assert_allclose(_ckernels.conv2d_forward(x, w, b),
                               _pykernels.conv2d_forward(x, w, b), rtol=1e-11, atol=1e-12)
    gy = rng.normal(size=(n, o, h - k + 1, wd - k + 1))
    for a, bb in zip(_ckernels.conv2d_backward(x, w, gy), _pykernels.conv2d_backward(x, w, gy)):
        np.testing.assert_allclose(a, bb, rtol=1e-11, atol=1e-12)
    size = int(min(rng.integers(1, 3), h, wd))
    y1, a1 = _ckernels.maxpool2d_forward(x, size, size)
    y2, a2 = _pykernels.maxpool2d_forward(x, size, size)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(a1, a2)
    g = rng.normal(size=y1.shape)
    np.testing.assert_allclose(_ckernels.maxpool2d_backward(g, a1, x.shape),
                               _pykernels.maxpool2d_backward(g, a2, x.shape), atol=1e-14)


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
