"""Reusable differentiable building blocks (conv compositions, pooling, stems).

A tiny module system: :class:`Module` provides recursive parameter discovery
so optimizers and tallies can walk a network, and every block is a callable
``Tensor -> Tensor``. Weight initialization draws from an explicit
``numpy.random.Generator`` so construction is reproducible.
"""

import numpy as np

from . import functional as F
from .tensor import Parameter


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def parameters(self):
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
        for child in self.children():
            yield from child.parameters()

    def modules(self):
        yield self
        for child in self.children():
            yield from child.modules()

    def parameter_count(self):
        return sum(p.size for p in self.parameters())


class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    """Outputs zeros shaped like the (possibly strided) input; no grad path."""

    def __init__(self, stride=1):
        self.stride = stride

    def forward(self, x):
        return F.zeros_like_strided(x, self.stride)


class Conv2d(Module):
    def __init__(self, c_in, c_out, ksize, rng, stride=1, padding=0, dilation=1, groups=1):
        kh, kw = (ksize, ksize) if isinstance(ksize, int) else ksize
        fan_in = (c_in // groups) * kh * kw
        self.weight = Parameter(he_normal(rng, (c_out, c_in // groups, kh, kw), fan_in))
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def forward(self, x):
        return F.conv2d(x, self.weight, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm(Module):
    """Per-batch-statistics normalization; optional learnable scale/shift.

    ``frozen_stats`` (a per-channel ``(mean, var)`` pair) bypasses batch
    statistics, which makes the op act per sample; tests use it to compare
    batched and unbatched forwards.
    """

    def __init__(self, channels, affine):
        self.channels = channels
        self.affine = affine
        self.frozen_stats = None
        if affine:
            self.gamma = Parameter(np.ones(channels))
            self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        if self.affine:
            return F.batchnorm(x, self.gamma, self.beta, frozen_stats=self.frozen_stats)
        return F.batchnorm(x, frozen_stats=self.frozen_stats)


class MaxPool3x3(Module):
    def __init__(self, stride=1):
        self.stride = stride

    def forward(self, x):
        return F.max_pool2d(x, (3, 3), self.stride, (1, 1))


class AvgPool3x3(Module):
    def __init__(self, stride=1):
        self.stride = stride

    def forward(self, x):
        return F.avg_pool2d(x, (3, 3), self.stride, (1, 1))


class ReLUConvBN(Module):
    def __init__(self, c_in, c_out, ksize, stride, padding, rng, affine):
        self.conv = Conv2d(c_in, c_out, ksize, rng, stride=stride, padding=padding)
        self.bn = BatchNorm(c_out, affine)

    def forward(self, x):
        return self.bn(self.conv(F.relu(x)))


class SepConv(Module):
    """Separable convolution: [ReLU, depthwise kxk, pointwise 1x1, BN] twice.

    The stride acts in the first pass only; the second runs at stride 1 on
    the already-reduced map.
    """

    def __init__(self, channels, ksize, stride, rng, affine):
        pad = ksize // 2
        self.dw1 = Conv2d(channels, channels, ksize, rng, stride=stride, padding=pad, groups=channels)
        self.pw1 = Conv2d(channels, channels, 1, rng)
        self.bn1 = BatchNorm(channels, affine)
        self.dw2 = Conv2d(channels, channels, ksize, rng, stride=1, padding=pad, groups=channels)
        self.pw2 = Conv2d(channels, channels, 1, rng)
        self.bn2 = BatchNorm(channels, affine)

    def forward(self, x):
        h = self.bn1(self.pw1(self.dw1(F.relu(x))))
        return self.bn2(self.pw2(self.dw2(F.relu(h))))


class DilConv(Module):
    """Dilated separable convolution: one [ReLU, dw kxk dil 2, pw 1x1, BN] pass."""

    def __init__(self, channels, ksize, stride, rng, affine, dilation=2):
        pad = dilation * (ksize - 1) // 2
        self.dw = Conv2d(
            channels, channels, ksize, rng, stride=stride, padding=pad, dilation=dilation, groups=channels
        )
        self.pw = Conv2d(channels, channels, 1, rng)
        self.bn = BatchNorm(channels, affine)

    def forward(self, x):
        return self.bn(self.pw(self.dw(F.relu(x))))


class FactorizedConv(Module):
    """1xL convolution chained with an Lx1 convolution (full channel mixing).

    At stride 2 the first (1xL) stage strides over time and the second (Lx1)
    stage over frequency, so each spatial dimension is halved exactly once.
    """

    def __init__(self, channels, length, stride, rng, affine):
        half = length // 2
        self.conv_a = Conv2d(channels, channels, (1, length), rng, stride=(stride, 1), padding=(0, half))
        self.conv_b = Conv2d(channels, channels, (length, 1), rng, stride=(1, stride), padding=(half, 0))
        self.bn = BatchNorm(channels, affine)

    def forward(self, x):
        return self.bn(self.conv_b(self.conv_a(F.relu(x))))


class FactorizedReduce(Module):
    """Stride-2 identity surrogate: concat of two offset strided 1x1 convs."""

    def __init__(self, c_in, c_out, rng, affine):
        if c_out % 2:
            raise ValueError(f"factorized reduce needs an even output width, got {c_out}")
        self.conv_a = Conv2d(c_in, c_out // 2, 1, rng, stride=2)
        self.conv_b = Conv2d(c_in, c_out // 2, 1, rng, stride=2)
        self.bn = BatchNorm(c_out, affine)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"factorized reduce needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
        h = F.relu(x)
        out = F.concat([self.conv_a(h), self.conv_b(F.crop(h, 1, 1))], axis=1)
        return self.bn(out)


class Stem(Module):
    """Maps the 3 derivative streams (3 input channels) to the working width."""

    def __init__(self, c_out, rng, c_in=3):
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.bn = BatchNorm(c_out, affine=True)

    def forward(self, x):
        return self.bn(self.conv(x))


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = Parameter(he_normal(rng, (n_out, n_in), n_in))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ClassifierHead(Module):
    """Per-frame FC stack, class projection, then frame-logit averaging.

    Input is the final cell state (n, c, t, f); every frame's (c x f) slice
    goes through the hidden layers and the class projection, and the
    per-frame logits are averaged over time.
    """

    def __init__(self, in_features, hidden_widths, n_classes, rng):
        self.in_features = in_features
        widths = [in_features, *hidden_widths]
        self.hidden = [Linear(a, b, rng) for a, b in zip(widths, widths[1:])]
        self.proj = Linear(widths[-1], n_classes, rng)

    def forward(self, x):
        n, c, tt, f = x.shape
        if c * f != self.in_features:
            raise ValueError(f"head expects {self.in_features} features per frame, got {c}x{f}")
        frames = F.reshape(F.transpose(x, (0, 2, 1, 3)), (n * tt, c * f))
        for layer in self.hidden:
            frames = F.relu(layer(frames))
        logits = self.proj(frames)
        return F.mean(F.reshape(logits, (n, tt, -1)), axis=1)
