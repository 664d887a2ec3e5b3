import numpy as np
import pytest

from graphprune import kernels
from graphprune._jit import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")

CASES = [(2, 3, 7, 7, 3, 1, 1), (1, 2, 6, 5, 2, 2, 0), (3, 1, 5, 5, 3, 2, 1), (2, 4, 4, 4, 1, 1, 0),
         (1, 1, 9, 9, 5, 3, 2)]


@needs_numba
@pytest.mark.parametrize("n,c,h,w,k,s,p", CASES)
def test_backends_agree(n, c, h, w, k, s, p):
    rng = np.random.default_rng(n * 100 + k)
    x = rng.normal(size=(n, c, h, w))
    cols_np = kernels.np_im2col(x, k, s, p)
    cols_nb = kernels.nb_im2col(x, k, s, p)
    assert np.array_equal(cols_np, cols_nb)
    assert np.allclose(kernels.np_col2im(cols_np, x.shape, k, s, p),
                       kernels.nb_col2im(cols_np, x.shape, k, s, p), atol=1e-12)

    out_np, arg_np = kernels.np_maxpool_forward(x, k, s, p)
    out_nb, arg_nb = kernels.nb_maxpool_forward(x, k, s, p)
    assert np.array_equal(out_np, out_nb) and np.array_equal(arg_np, arg_nb)
    d = rng.normal(size=out_np.shape)
    assert np.allclose(kernels.np_maxpool_backward(d, arg_np, x.shape, k, s, p),
                       kernels.nb_maxpool_backward(d, arg_nb, x.shape, k, s, p), atol=1e-12)

    a_np = kernels.np_avgpool_forward(x, k, s, p)
    assert np.allclose(a_np, kernels.nb_avgpool_forward(x, k, s, p), atol=1e-12)
    assert np.allclose(kernels.np_avgpool_backward(d, x.shape, k, s, p),
                       kernels.nb_avgpool_backward(d, x.shape, k, s, p), atol=1e-12)


@pytest.mark.parametrize("n,c,h,w,k,s,p", CASES)
def test_col2im_is_adjoint_of_im2col(n, c, h, w, k, s, p):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(n, c, h, w))
    cols = kernels.im2col(x, k, s, p)
    y = rng.normal(size=cols.shape)
    assert np.dot(cols.ravel(), y.ravel()) == pytest.approx(
        np.dot(x.ravel(), kernels.col2im(y, x.shape, k, s, p).ravel()))


def test_conv_via_im2col_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    cols = kernels.im2col(x, 3, 2, 1)
    out = (w.reshape(4, -1) @ cols).reshape(4, 2, 3, 3).transpose(1, 0, 2, 3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    assert np.allclose(out, ref)


def test_maxpool_ties_pick_first():
    x = np.ones((1, 1, 2, 2))
    out, arg = kernels.np_maxpool_forward(x, 2, 1, 0)
    assert arg.ravel().tolist() == [0]
    if HAVE_NUMBA:
        assert kernels.nb_maxpool_forward(x, 2, 1, 0)[1].ravel().tolist() == [0]


def test_backend_flag_recorded():
    assert kernels.BACKEND in ("numba", "numpy")
