"""Parameter update rules and the cosine learning-rate schedule."""

import math

import numpy as np


def cosine_lr(epoch, total_epochs, lr_init):
    """Half-cosine decay from ``lr_init`` at epoch 0 to 0 at ``total_epochs``."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_momentum_step(params, lr, momentum=0.9, weight_decay=0.0003):
    """buf <- momentum*buf + grad + wd*value; value <- value - lr*buf."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    for p in params:
        buf = p.momentum_buf
        buf *= momentum
        buf += p.grad
        if weight_decay:
            buf += weight_decay * p.data
        p.data -= lr * buf


def zero_grads(params):
    for p in params:
        p.zero_grad()


class SgdMomentum:
    """Momentum SGD over a fixed parameter list; lr is passed per step."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0003):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, lr):
        sgd_momentum_step(self.params, lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        zero_grads(self.params)


class Adam:
    """Adaptive-moment optimizer, used for the architecture logits."""

    def __init__(self, params, lr=3e-4, betas=(0.5, 0.999), eps=1e-8, weight_decay=1e-3):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self):
        zero_grads(self.params)
