"""Autodiff core: forward semantics, backward contracts, gradient checks."""

import numpy as np
import pytest
from _oracles import assert_grads_close, finite_difference

import cellsearch.functional as F
from cellsearch.optim import cosine_lr, sgd_momentum_step
from cellsearch.tensor import Parameter, ShapeMismatchError, Tensor


def t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# -- forward semantics --------------------------------------------------------


def test_conv_identity_kernel():
    x = t(np.ones((1, 1, 4, 4)))
    w = Parameter(np.ones((1, 1, 1, 1)))
    y = F.conv2d(x, w)
    assert y.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(y.data, np.ones((1, 1, 4, 4)))


def test_conv_same_padding_preserves_shape():
    x = t(np.random.default_rng(0).standard_normal((1, 3, 16, 40)))
    w = Parameter(np.random.default_rng(1).standard_normal((16, 3, 3, 3)))
    y = F.conv2d(x, w, stride=1, padding=(1, 1))
    assert y.shape == (1, 16, 16, 40)


def test_depthwise_strided_shape():
    # floor((16 + 2 - 1*(3-1) - 1)/2) + 1 = 8, floor((40 + 2 - 2 - 1)/2) + 1 = 20
    x = t(np.random.default_rng(2).standard_normal((1, 8, 16, 40)))
    w = Parameter(np.random.default_rng(3).standard_normal((8, 1, 3, 3)))
    y = F.conv2d(x, w, stride=2, padding=(1, 1), groups=8)
    assert y.shape == (1, 8, 8, 20)


def test_conv_channel_mismatch_rejected():
    x = t(np.zeros((1, 3, 8, 8)))
    w = Parameter(np.zeros((4, 5, 3, 3)))
    with pytest.raises(ShapeMismatchError) as err:
        F.conv2d(x, w, padding=(1, 1))
    assert "3" in str(err.value) and "channel" in str(err.value)


def test_softmax_symmetry():
    y = F.softmax(t([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(y.data, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=0)


def test_avgpool_constant_map():
    y = F.avg_pool2d(t(np.full((1, 2, 5, 5), 7.0)))
    np.testing.assert_array_equal(y.data, np.full((1, 2, 5, 5), 7.0))


def test_batchnorm_moments():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8, 3, 6, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    x = x * 2.0 + 5.0  # per-channel mean 5, variance 4
    y = F.batchnorm(t(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    adjusted = 4.0 / (4.0 + 1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), adjusted, atol=1e-6)


def test_forward_outputs_finite():
    rng = np.random.default_rng(5)
    x = t(rng.standard_normal((2, 4, 8, 8)) * 50.0)
    w = Parameter(rng.standard_normal((4, 4, 3, 3)))
    y = F.batchnorm(F.conv2d(F.relu(x), w, padding=(1, 1)))
    y = F.max_pool2d(y)
    assert np.isfinite(y.data).all()


# -- backward contracts -------------------------------------------------------


def test_linear_map_gradient_is_input():
    rng = np.random.default_rng(6)
    xv = rng.standard_normal((2, 3, 4, 5))
    w = Parameter(rng.standard_normal((2, 3, 4, 5)))
    loss = F.sum_all(F.mul(t(xv), w))
    loss.backward()
    np.testing.assert_array_equal(w.grad, xv)


def test_backward_accumulates_exactly():
    rng = np.random.default_rng(7)
    w = Parameter(rng.standard_normal((3, 3)))
    x = t(rng.standard_normal((2, 3)))
    loss = F.sum_all(F.linear(x, w))
    loss.backward()
    g1 = w.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2.0 * g1)
    w.zero_grad()
    np.testing.assert_array_equal(w.grad, np.zeros_like(w.data))


def test_backward_rejects_non_scalar():
    x = t(np.ones((2, 2)), grad=True)
    y = F.relu(x)
    with pytest.raises(ValueError):
        y.backward()


def test_graph_is_topologically_ordered():
    rng = np.random.default_rng(8)
    x = t(rng.standard_normal((1, 2, 4, 4)), grad=True)
    a = F.relu(x)
    b = F.avg_pool2d(a)
    c = F.add(a, b)
    loss = F.sum_all(c)
    g = loss.graph()
    assert g.is_topologically_ordered()
    assert any(rec.op == "add" for rec in g.nodes)


def test_graph_determinism_bitwise():
    def run():
        rng = np.random.default_rng(9)
        x = t(rng.standard_normal((2, 3, 8, 8)), grad=True)
        w = Parameter(rng.standard_normal((4, 3, 3, 3)))
        y = F.batchnorm(F.conv2d(F.relu(x), w, padding=(1, 1)))
        loss = F.sum_all(F.max_pool2d(y, stride=2))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    la, xa, wa = run()
    lb, xb, wb = run()
    assert (la == lb).all() and (xa == xb).all() and (wa == wb).all()


def test_free_graph_caps_reuse():
    x = t(np.ones((2, 2)), grad=True)
    loss = F.sum_all(F.relu(x))
    loss.backward(free_graph=True)
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))
    assert loss._backward is None


# -- finite-difference gradient checks ---------------------------------------

EPS = 1e-5
SEEDS = range(20)


def check(loss_fn, tensors, seed, sample=None, label=""):
    for v in tensors.values():
        if v.grad is not None:
            v.zero_grad()
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed + 1000)
    for name, v in tensors.items():
        n = v.data.size
        coords = None if sample is None else sorted(rng.choice(n, size=min(sample, n), replace=False))
        fd = finite_difference(lambda: loss_fn().item(), v.data, eps=EPS, coords=coords)
        assert_grads_close(v.grad, fd, label=f"{label}/{name} seed {seed}")


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_conv_variants(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.standard_normal((2, 4, 6, 7)), grad=True)
    for kw in ({"padding": (1, 1)}, {"stride": 2, "padding": (1, 1)}, {"padding": (2, 2), "dilation": 2}):
        w = Parameter(rng.standard_normal((4, 4, 3, 3)) * 0.5)
        cmat = t(rng.standard_normal(F.conv2d(x, w, **kw).shape))
        check(lambda: F.sum_all(F.mul(F.conv2d(x, w, **kw), cmat)), {"x": x, "w": w}, seed, label=f"conv{kw}")
    wd = Parameter(rng.standard_normal((4, 1, 3, 3)) * 0.5)
    check(lambda: F.sum_all(F.conv2d(x, wd, padding=(1, 1), groups=4)), {"x": x, "w": wd}, seed, label="depthwise")


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_norm_pool_linear(seed):
    rng = np.random.default_rng(seed + 100)
    x = t(rng.standard_normal((3, 2, 5, 6)), grad=True)
    g = Parameter(rng.standard_normal(2) * 0.5 + 1.0)
    b = Parameter(rng.standard_normal(2) * 0.2)
    cmat = t(rng.standard_normal((3, 2, 5, 6)))
    check(lambda: F.sum_all(F.mul(F.batchnorm(x, g, b), cmat)), {"x": x, "g": g, "b": b}, seed, label="batchnorm")
    cpool = t(rng.standard_normal((3, 2, 3, 3)))
    check(lambda: F.sum_all(F.mul(F.max_pool2d(x, stride=2), cpool)), {"x": x}, seed, label="maxpool")
    check(lambda: F.sum_all(F.avg_pool2d(x)), {"x": x}, seed, label="avgpool")
    x2 = t(rng.standard_normal((4, 6)), grad=True)
    w2 = Parameter(rng.standard_normal((3, 6)))
    b2 = Parameter(rng.standard_normal(3))
    check(lambda: F.sum_all(F.linear(x2, w2, b2)), {"x": x2, "w": w2, "b": b2}, seed, label="linear")


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_softmax_loss_misc(seed):
    rng = np.random.default_rng(seed + 200)
    x = t(rng.standard_normal((3, 5)), grad=True)
    cmat = t(rng.standard_normal((3, 5)))
    check(lambda: F.sum_all(F.mul(F.softmax(x, axis=1), cmat)), {"x": x}, seed, label="softmax")
    labels = rng.integers(0, 5, size=3)
    check(lambda: F.cross_entropy_loss(x, labels), {"x": x}, seed, label="xent")

    a = t(rng.standard_normal((2, 3, 4, 4)), grad=True)
    bb = t(rng.standard_normal((2, 3, 4, 4)), grad=True)
    cc = t(rng.standard_normal((2, 3, 4, 4)), grad=True)
    wts = t(rng.standard_normal(3), grad=True)
    cmat4 = t(rng.standard_normal((2, 3, 4, 4)))
    check(lambda: F.sum_all(F.mul(F.weighted_sum([a, bb, cc], wts), cmat4)),
          {"a": a, "b": bb, "c": cc, "w": wts}, seed, label="weighted_sum")
    ccat = t(rng.standard_normal((2, 6, 4, 4)))
    check(lambda: F.sum_all(F.mul(F.concat([a, bb], axis=1), ccat)), {"a": a, "b": bb}, seed, label="concat")
    ccrop = t(rng.standard_normal((2, 3, 3, 3)))
    check(lambda: F.sum_all(F.mul(F.crop(a, 1, 1), ccrop)), {"a": a}, seed, label="crop")
    check(lambda: F.sum_all(F.add_n([a, bb, cc])), {"a": a, "b": bb}, seed, label="add_n")


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_relu_composite(seed):
    # keep preactivations away from the kink so central differences are valid
    rng = np.random.default_rng(seed + 300)
    raw = rng.standard_normal((2, 3, 6, 6))
    raw = raw + np.sign(raw) * 0.05
    x = t(raw, grad=True)
    w = Parameter(rng.standard_normal((3, 3, 3, 3)) * 0.4)

    def loss_fn():
        h = F.conv2d(F.relu(x), w, padding=(1, 1))
        h = F.batchnorm(h)
        return F.sum_all(F.mul(h, t(np.ones(h.shape))))

    check(loss_fn, {"x": x, "w": w}, seed, sample=24, label="relu-composite")


# -- optimizer and schedule ---------------------------------------------------


def test_sgd_momentum_hand_example():
    p = Parameter(np.array(1.0))
    p.grad = np.array(1.0)
    sgd_momentum_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p.data == pytest.approx(0.9)
    assert p.momentum_buf == pytest.approx(1.0)


def test_sgd_zero_lr_is_noop_on_values():
    rng = np.random.default_rng(10)
    p = Parameter(rng.standard_normal((3, 3)))
    p.grad = rng.standard_normal((3, 3))
    before = p.data.copy()
    sgd_momentum_step([p], lr=0.0)
    np.testing.assert_array_equal(p.data, before)


def test_sgd_default_hyperparameters():
    import inspect

    sig = inspect.signature(sgd_momentum_step)
    assert sig.parameters["momentum"].default == 0.9
    assert sig.parameters["weight_decay"].default == 0.0003


def test_cosine_schedule():
    assert cosine_lr(0, 15, 0.01) == pytest.approx(0.01)
    assert cosine_lr(15, 15, 0.01) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(10, 20, 0.01) == pytest.approx(0.005)
    vals = [cosine_lr(e, 15, 0.01) for e in range(16)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_lr(16, 15, 0.01)
    with pytest.raises(ValueError):
        cosine_lr(-1, 15, 0.01)
