"""Both kernel backends against independent loop oracles and each other."""

import numpy as np
import pytest
from _oracles import avgpool_loops, conv2d_backward_loops, conv2d_loops, maxpool_loops

from cellsearch.kernels import _npkernels

try:
    from cellsearch.kernels import _cykernels
except ImportError:
    _cykernels = None

BACKENDS = [_npkernels] + ([_cykernels] if _cykernels is not None else [])
BACKEND_IDS = [m.BACKEND_NAME for m in BACKENDS]

CONV_CASES = [
    # (n, c_in, h, w, c_out, kh, kw, stride, pad, dil, groups)
    (2, 3, 6, 7, 4, 3, 3, (1, 1), (1, 1), (1, 1), 1),
    (1, 4, 8, 8, 4, 3, 3, (2, 2), (1, 1), (1, 1), 4),
    (2, 4, 9, 5, 6, 3, 3, (1, 1), (2, 2), (2, 2), 2),
    (1, 3, 6, 10, 5, 1, 7, (1, 1), (0, 3), (1, 1), 1),
    (1, 3, 10, 6, 5, 7, 1, (1, 2), (3, 0), (1, 1), 1),
    (2, 6, 6, 6, 6, 1, 1, (1, 1), (0, 0), (1, 1), 1),
    (1, 2, 7, 7, 2, 5, 5, (2, 1), (2, 2), (1, 1), 2),
    (1, 8, 6, 6, 8, 3, 3, (2, 2), (2, 2), (2, 2), 8),
]

POOL_CASES = [
    # (n, c, h, w, ksize, stride, pad)
    (2, 3, 6, 8, (3, 3), (1, 1), (1, 1)),
    (1, 4, 8, 8, (3, 3), (2, 2), (1, 1)),
    (2, 2, 5, 7, (3, 3), (1, 2), (1, 1)),
    (1, 1, 4, 4, (2, 2), (2, 2), (0, 0)),
]


@pytest.fixture(params=BACKENDS, ids=BACKEND_IDS)
def impl(request):
    return request.param


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_forward_matches_loop_oracle(impl, case):
    n, c_in, h, w, c_out, kh, kw, stride, pad, dil, groups = case
    rng = np.random.default_rng(7)
    x = rng.standard_normal((n, c_in, h, w))
    wt = rng.standard_normal((c_out, c_in // groups, kh, kw))
    got = impl.conv2d_forward(x, wt, stride, pad, dil, groups)
    want = conv2d_loops(x, wt, stride, pad, dil, groups)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_backward_matches_loop_oracle(impl, case):
    n, c_in, h, w, c_out, kh, kw, stride, pad, dil, groups = case
    rng = np.random.default_rng(11)
    x = rng.standard_normal((n, c_in, h, w))
    wt = rng.standard_normal((c_out, c_in // groups, kh, kw))
    y = conv2d_loops(x, wt, stride, pad, dil, groups)
    gy = rng.standard_normal(y.shape)
    want_gx, want_gw = conv2d_backward_loops(gy, x, wt, stride, pad, dil, groups)
    got_gx = impl.conv2d_backward_input(gy, wt, x.shape, stride, pad, dil, groups)
    got_gw = impl.conv2d_backward_weight(gy, x, wt.shape, stride, pad, dil, groups)
    np.testing.assert_allclose(got_gx, want_gx, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(got_gw, want_gw, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("case", POOL_CASES)
def test_pools_match_loop_oracle(impl, case):
    n, c, h, w, ksize, stride, pad = case
    rng = np.random.default_rng(3)
    x = rng.standard_normal((n, c, h, w))
    got_max, argmax = impl.maxpool2d_forward(x, ksize, stride, pad)
    np.testing.assert_array_equal(got_max, maxpool_loops(x, ksize, stride, pad))
    got_avg = impl.avgpool2d_forward(x, ksize, stride, pad)
    np.testing.assert_allclose(got_avg, avgpool_loops(x, ksize, stride, pad), rtol=1e-13)


@pytest.mark.parametrize("case", POOL_CASES)
def test_pool_backwards_distribute_correctly(impl, case):
    # adjoint identity: <gy, pool(x)> gradient routing checked elementwise
    n, c, h, w, ksize, stride, pad = case
    rng = np.random.default_rng(5)
    x = rng.standard_normal((n, c, h, w))
    y, argmax = impl.maxpool2d_forward(x, ksize, stride, pad)
    gy = rng.standard_normal(y.shape)
    gx = impl.maxpool2d_backward(gy, argmax, x.shape, ksize, stride, pad)
    # each output's grad lands exactly on its argmax input
    total_in, total_out = gx.sum(), gy.sum()
    assert abs(total_in - total_out) < 1e-9

    gavg = impl.avgpool2d_backward(gy, x.shape, ksize, stride, pad)
    assert abs(gavg.sum() - gy.sum()) < 1e-9  # averages conserve mass


def test_maxpool_never_picks_padding(impl):
    x = -np.ones((1, 1, 4, 4))
    y, _ = impl.maxpool2d_forward(x, (3, 3), (1, 1), (1, 1))
    assert (y == -1).all()


def test_avgpool_constant_invariance(impl):
    x = np.full((2, 3, 5, 5), 7.0)
    y = impl.avgpool2d_forward(x, (3, 3), (1, 1), (1, 1))
    np.testing.assert_array_equal(y, np.full((2, 3, 5, 5), 7.0))


def test_empty_output_rejected(impl):
    x = np.zeros((1, 1, 2, 2))
    w = np.zeros((1, 1, 5, 5))
    with pytest.raises(ValueError):
        impl.conv2d_forward(x, w, (1, 1), (0, 0), (1, 1), 1)
    with pytest.raises(ValueError):
        impl.avgpool2d_forward(x, (5, 5), (1, 1), (0, 0))


@pytest.mark.skipif(_cykernels is None, reason="compiled backend not built")
@pytest.mark.parametrize("case", CONV_CASES)
def test_backends_agree(case):
    n, c_in, h, w, c_out, kh, kw, stride, pad, dil, groups = case
    rng = np.random.default_rng(13)
    x = rng.standard_normal((n, c_in, h, w))
    wt = rng.standard_normal((c_out, c_in // groups, kh, kw))
    a = _npkernels.conv2d_forward(x, wt, stride, pad, dil, groups)
    b = _cykernels.conv2d_forward(x, wt, stride, pad, dil, groups)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    gy = rng.standard_normal(a.shape)
    np.testing.assert_allclose(
        _npkernels.conv2d_backward_input(gy, wt, x.shape, stride, pad, dil, groups),
        _cykernels.conv2d_backward_input(gy, wt, x.shape, stride, pad, dil, groups),
        rtol=1e-12,
        atol=1e-13,
    )
    np.testing.assert_allclose(
        _npkernels.conv2d_backward_weight(gy, x, wt.shape, stride, pad, dil, groups),
        _cykernels.conv2d_backward_weight(gy, x, wt.shape, stride, pad, dil, groups),
        rtol=1e-12,
        atol=1e-13,
    )


def test_forward_is_deterministic(impl):
    rng = np.random.default_rng(17)
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((8, 4, 3, 3))
    a = impl.conv2d_forward(x, w, (1, 1), (1, 1), (1, 1), 1)
    b = impl.conv2d_forward(x, w, (1, 1), (1, 1), (1, 1), 1)
    assert (a == b).all()
