"""Differentiable primitives over :class:`~cellsearch.tensor.Tensor`.

Each function runs its forward pass through the active kernel backend (or
plain numpy for the cheap elementwise/reduction ops) and attaches a closure
that routes the output gradient to whichever parents require one.
"""

import numpy as np

from . import kernels as K
from .tensor import ShapeMismatchError, Tensor, make_op


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d(x, w, stride=(1, 1), padding=(0, 0), dilation=(1, 1), groups=1):
    """2-D cross-correlation of (n, c, h, w) input with (co, ci/g, kh, kw) weight."""
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects rank-4 operands, got {x.shape} and {w.shape}")
    if min(stride) < 1 or min(dilation) < 1:
        raise ValueError(f"conv2d stride/dilation must be >= 1, got {stride}/{dilation}")
    n, c_in, h, wd = x.shape
    c_out, c_in_g, kh, kw = w.shape
    if c_in % groups or c_out % groups:
        raise ShapeMismatchError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input has {c_in} channels but weight "
            f"{w.shape} expects {c_in_g * groups} (groups={groups})"
        )
    xd, wd_ = _c(x.data), _c(w.data)
    y = K.conv2d_forward(xd, wd_, stride, padding, dilation, groups)

    def backward(gy):
        gy = _c(gy)
        if x.requires_grad:
            x.accumulate_grad(
                K.conv2d_backward_input(gy, wd_, x.shape, stride, padding, dilation, groups), owned=True
            )
        if w.requires_grad:
            w.accumulate_grad(
                K.conv2d_backward_weight(gy, xd, w.shape, stride, padding, dilation, groups), owned=True
            )

    return make_op(y, "conv2d", (x, w), backward)


def relu(x):
    y = np.maximum(x.data, 0.0)

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy * (x.data > 0.0), owned=True)

    return make_op(y, "relu", (x,), backward)


def batchnorm(x, gamma=None, beta=None, eps=1e-5, frozen_stats=None):
    """Per-batch normalization over (batch, time, freq) for each channel.

    Statistics always come from the current batch (there are no running
    buffers); ``frozen_stats=(mean, var)`` substitutes fixed per-channel
    moments instead, which makes the op purely per-sample. ``gamma``/``beta``
    enable the learnable affine transform.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"batchnorm expects a rank-4 input, got {x.shape}")
    if (gamma is None) != (beta is None):
        raise ValueError("batchnorm needs both gamma and beta, or neither")
    axes = (0, 2, 3)
    if frozen_stats is None:
        m = x.data.mean(axis=axes, keepdims=True)
        v = x.data.var(axis=axes, keepdims=True)
    else:
        m, v = frozen_stats
        m = np.broadcast_to(np.asarray(m, dtype=np.float64), (1, x.shape[1], 1, 1))
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), (1, x.shape[1], 1, 1))
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m) * inv
    if gamma is not None:
        g4 = gamma.data.reshape(1, -1, 1, 1)
        b4 = beta.data.reshape(1, -1, 1, 1)
        y = xhat * g4 + b4
    else:
        y = xhat
    parents = (x,) if gamma is None else (x, gamma, beta)

    def backward(gy):
        gxhat = gy if gamma is None else gy * g4
        if x.requires_grad:
            if frozen_stats is not None:
                gx = gxhat * inv
            else:
                mg = gxhat.mean(axis=axes, keepdims=True)
                mgx = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = inv * (gxhat - mg - xhat * mgx)
            x.accumulate_grad(gx, owned=True)
        if gamma is not None and gamma.requires_grad:
            gamma.accumulate_grad((gy * xhat).sum(axis=axes), owned=True)
        if beta is not None and beta.requires_grad:
            beta.accumulate_grad(gy.sum(axis=axes), owned=True)

    return make_op(y, "batchnorm", parents, backward)


def max_pool2d(x, ksize=(3, 3), stride=(1, 1), padding=(1, 1)):
    """Max pooling; padded positions never win the max."""
    ksize, stride, padding = _pair(ksize), _pair(stride), _pair(padding)
    y, argmax = K.maxpool2d_forward(_c(x.data), ksize, stride, padding)

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(K.maxpool2d_backward(_c(gy), argmax, x.shape, ksize, stride, padding), owned=True)

    return make_op(y, "max_pool2d", (x,), backward)


def avg_pool2d(x, ksize=(3, 3), stride=(1, 1), padding=(1, 1)):
    """Average pooling over in-bounds window elements (padding excluded)."""
    ksize, stride, padding = _pair(ksize), _pair(stride), _pair(padding)
    y = K.avgpool2d_forward(_c(x.data), ksize, stride, padding)

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(K.avgpool2d_backward(_c(gy), x.shape, ksize, stride, padding), owned=True)

    return make_op(y, "avg_pool2d", (x,), backward)


def linear(x, w, b=None):
    """Fully connected layer: (m, f) @ (o, f)^T + b."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"linear shapes incompatible: x {x.shape}, w {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy @ w.data, owned=True)
        if w.requires_grad:
            w.accumulate_grad(gy.T @ x.data, owned=True)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gy.sum(axis=0), owned=True)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(y, "linear", parents, backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(gy):
        if x.requires_grad:
            inner = (gy * y).sum(axis=axis, keepdims=True)
            x.accumulate_grad(y * (gy - inner), owned=True)

    return make_op(y, "softmax", (x,), backward)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax logits."""
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy_loss expects (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels)
    m = logits.shape[0]
    if labels.shape != (m,):
        raise ShapeMismatchError(f"labels shape {labels.shape} does not match batch {m}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(m), labels].mean()

    def backward(gy):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(m), labels] -= 1.0
            logits.accumulate_grad(p * (float(gy) / m), owned=True)

    return make_op(loss, "cross_entropy_loss", (logits,), backward)


def add(x, y):
    """Elementwise sum of two same-shape tensors."""
    if x.shape != y.shape:
        raise ShapeMismatchError(f"add shapes differ: {x.shape} vs {y.shape}")
    out = x.data + y.data

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy, owned=False)
        if y.requires_grad:
            y.accumulate_grad(gy, owned=False)

    return make_op(out, "add", (x, y), backward)


def mul(x, y):
    """Elementwise product of two same-shape tensors."""
    if x.shape != y.shape:
        raise ShapeMismatchError(f"mul shapes differ: {x.shape} vs {y.shape}")
    out = x.data * y.data

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy * y.data, owned=True)
        if y.requires_grad:
            y.accumulate_grad(gy * x.data, owned=True)

    return make_op(out, "mul", (x, y), backward)


def sum_all(x):
    """Scalar sum of all elements."""
    out = x.data.sum()

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(np.full(x.shape, float(gy)), owned=True)

    return make_op(out, "sum_all", (x,), backward)


def add_n(tensors):
    """Sum of several same-shape tensors in one tape node."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeMismatchError(f"add_n shapes differ: {shape} vs {t.shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def backward(gy):
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(gy, owned=False)

    return make_op(out, "add_n", tuple(tensors), backward)


def weighted_sum(tensors, weights):
    """``sum_i weights[i] * tensors[i]`` with gradients for both sides.

    ``weights`` is a 1-D tensor whose length matches ``tensors``; the weight
    gradient of each branch is the full inner product <gy, x_i>.
    """
    tensors = list(tensors)
    if weights.ndim != 1 or len(tensors) != weights.shape[0]:
        raise ShapeMismatchError(
            f"weighted_sum needs one weight per tensor: {len(tensors)} tensors, "
            f"weights shape {weights.shape}"
        )
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeMismatchError(f"weighted_sum operand shapes differ: {shape} vs {t.shape}")
    wd = weights.data
    out = tensors[0].data * wd[0]
    for i, t in enumerate(tensors[1:], start=1):
        out += t.data * wd[i]

    def backward(gy):
        if weights.requires_grad:
            gw = np.array([np.dot(gy.ravel(), t.data.ravel()) for t in tensors])
            weights.accumulate_grad(gw, owned=True)
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(gy * wd[i], owned=True)

    return make_op(out, "weighted_sum", tuple(tensors) + (weights,), backward)


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channel concat for cell outputs)."""
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(gy):
        pieces = np.split(gy, splits, axis=axis)
        for t, g in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(g, owned=False)

    return make_op(out, "concat", tuple(tensors), backward)


def crop(x, offset_h, offset_w):
    """Drop the first ``offset`` rows/cols of the spatial dims."""
    y = x.data[:, :, offset_h:, offset_w:]

    def backward(gy):
        if x.requires_grad:
            gx = np.zeros(x.shape)
            gx[:, :, offset_h:, offset_w:] = gy
            x.accumulate_grad(gx, owned=True)

    return make_op(y.copy(), "crop", (x,), backward)


def scale(x, c):
    """Multiply by a constant scalar or ndarray (no gradient for ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    y = x.data * c

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy * c, owned=True)

    return make_op(y, "scale", (x,), backward)


def zeros_like_strided(x, stride=(1, 1)):
    """All-zero tensor shaped like ``x`` subsampled by ``stride``; no grad path."""
    sh, sw = _pair(stride)
    n, c, h, w = x.shape
    shape = (n, c, (h + sh - 1) // sh, (w + sw - 1) // sw)
    out = Tensor(np.zeros(shape))
    out._op = "zero"
    return out


def dropout(x, rate, rng):
    """Inverted elementwise dropout; rate 0 returns ``x`` itself untouched."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return scale(x, mask)


def reshape(x, shape):
    y = x.data.reshape(shape)

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy.reshape(x.shape), owned=False)

    return make_op(y, "reshape", (x,), backward)


def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    y = x.data.transpose(axes)

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy.transpose(inv), owned=False)

    return make_op(y, "transpose", (x,), backward)


def mean(x, axis, keepdims=False):
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    y = x.data.mean(axis=axis, keepdims=keepdims)
    count = int(np.prod([x.shape[a] for a in axis]))

    def backward(gy):
        if x.requires_grad:
            g = gy if keepdims else np.expand_dims(gy, axis)
            x.accumulate_grad(np.broadcast_to(g, x.shape) / count, owned=True)

    return make_op(y, "mean", (x,), backward)


# Registry of the differentiable primitive suite, mainly for gradient-check
# loops and introspection.
PRIMITIVES = {
    "conv2d": conv2d,
    "relu": relu,
    "batchnorm": batchnorm,
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "linear": linear,
    "softmax": softmax,
    "cross_entropy_loss": cross_entropy_loss,
    "add": add,
    "add_n": add_n,
    "mul": mul,
    "sum_all": sum_all,
    "weighted_sum": weighted_sum,
    "concat": concat,
    "crop": crop,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
}
