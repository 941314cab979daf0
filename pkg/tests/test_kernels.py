import numpy as np
import pytest
from numpy.testing import assert_allclose

from protoeeg import kernels as k


SHAPES = [
    # (n, ci, h, w), (co, kh, kw), (sh, sw) -- includes the real backbone blocks
    ((2, 1, 128, 37), (16, 5, 5), (2, 2)),
    ((2, 16, 62, 17), (32, 5, 4), (2, 2)),
    ((2, 32, 29, 7), (64, 10, 3), (2, 2)),
    ((2, 64, 10, 3), (128, 10, 3), (1, 1)),
    ((3, 2, 9, 8), (4, 3, 3), (1, 2)),
    ((1, 3, 6, 6), (2, 6, 6), (1, 1)),  # kernel == input, single output cell
]


def test_out_shape():
    assert k.out_shape(128, 37, 5, 5, 2, 2) == (62, 17)
    assert k.out_shape(10, 3, 10, 3, 1, 1) == (1, 1)


@pytest.mark.parametrize("xshape,kspec,stride", SHAPES)
def test_forward_matches_direct_sum(xshape, kspec, stride, rng):
    n, ci, h, w = xshape
    co, kh, kw = kspec
    sh, sw = stride
    x = rng.standard_normal(xshape)
    kern = rng.standard_normal((co, ci, kh, kw))
    out = k.conv2d_forward_numpy(x, kern, sh, sw)
    ho, wo = k.out_shape(h, w, kh, kw, sh, sw)
    assert out.shape == (n, co, ho, wo)
    for s in (0, n - 1):
        for c in (0, co - 1):
            for oh in (0, ho - 1):
                for ow in (0, wo - 1):
                    patch = x[s, :, oh * sh:oh * sh + kh, ow * sw:ow * sw + kw]
                    assert out[s, c, oh, ow] == pytest.approx(np.sum(patch * kern[c]))


@pytest.mark.parametrize("xshape,kspec,stride", SHAPES)
def test_backward_input_is_adjoint(xshape, kspec, stride, rng):
    # <conv(x), y> == <x, conv_bwd_input(y)> for all y
    n, ci, h, w = xshape
    co, kh, kw = kspec
    sh, sw = stride
    x = rng.standard_normal(xshape)
    kern = rng.standard_normal((co, ci, kh, kw))
    out = k.conv2d_forward_numpy(x, kern, sh, sw)
    y = rng.standard_normal(out.shape)
    gin = k.conv2d_backward_input_numpy(y, kern, h, w, sh, sw)
    assert np.vdot(out, y) == pytest.approx(np.vdot(x, gin), rel=1e-10)


@pytest.mark.parametrize("xshape,kspec,stride", SHAPES)
def test_backward_kernels_is_adjoint(xshape, kspec, stride, rng):
    n, ci, h, w = xshape
    co, kh, kw = kspec
    sh, sw = stride
    x = rng.standard_normal(xshape)
    kern = rng.standard_normal((co, ci, kh, kw))
    out = k.conv2d_forward_numpy(x, kern, sh, sw)
    y = rng.standard_normal(out.shape)
    gk = k.conv2d_backward_kernels_numpy(y, x, kh, kw, sh, sw)
    assert np.vdot(out, y) == pytest.approx(np.vdot(kern, gk), rel=1e-10)


needs_numba = pytest.mark.skipif(not k._HAVE_NUMBA, reason="numba not installed")


@needs_numba
@pytest.mark.parametrize("xshape,kspec,stride", SHAPES)
def test_backends_agree(xshape, kspec, stride, rng):
    n, ci, h, w = xshape
    co, kh, kw = kspec
    sh, sw = stride
    x = rng.standard_normal(xshape)
    kern = rng.standard_normal((co, ci, kh, kw))
    f_np = k.conv2d_forward_numpy(x, kern, sh, sw)
    f_nb = k.conv2d_forward_numba(x, kern, sh, sw)
    assert_allclose(f_nb, f_np, rtol=1e-10, atol=1e-12)

    g = rng.standard_normal(f_np.shape)
    assert_allclose(
        k.conv2d_backward_input_numba(g, kern, h, w, sh, sw),
        k.conv2d_backward_input_numpy(g, kern, h, w, sh, sw),
        rtol=1e-10, atol=1e-12,
    )
    assert_allclose(
        k.conv2d_backward_kernels_numba(g, x, kh, kw, sh, sw),
        k.conv2d_backward_kernels_numpy(g, x, kh, kw, sh, sw),
        rtol=1e-10, atol=1e-12,
    )


def test_selected_backend_reported():
    assert k.BACKEND in ("numba", "numpy")


def test_warmup_runs():
    k.warmup()
