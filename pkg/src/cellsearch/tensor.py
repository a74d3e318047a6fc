"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array plus the bookkeeping needed to run
backpropagation: the op that produced it, its parent tensors, and a closure
that routes an incoming output gradient to the parents. Activations are
rank-4 ``(batch, channel, time, freq)`` arrays by convention; parameters may
be any rank.

Gradients accumulate: calling ``backward`` twice without ``zero_grad``
doubles every leaf gradient.
"""

from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    """An operation received operands with incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------

    def topo_order(self):
        """All tensors reachable from this one, inputs before consumers."""
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def graph(self):
        """Snapshot of the computation recorded behind this tensor."""
        order = self.topo_order()
        ids = {id(t): i for i, t in enumerate(order)}
        nodes = [
            GraphRecord(node_id=i, op=t._op, parent_ids=tuple(ids[id(p)] for p in t._parents))
            for i, t in enumerate(order)
        ]
        return Graph(nodes=nodes, outputs=(len(order) - 1,))

    # -- backward ---------------------------------------------------------

    def backward(self, free_graph=False):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be scalar. Leaf grads persist and accumulate across
        calls; intermediate grads are propagation buffers and are released
        as soon as they have been consumed. With ``free_graph`` the tape
        itself (closures, saved activations) is torn down too, capping peak
        memory but making a second backward over the same graph impossible.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if self._backward is None:
            if self.requires_grad:
                self.accumulate_grad(np.ones_like(self.data), owned=True)
            return
        self.grad = np.ones_like(self.data)
        for t in reversed(self.topo_order()):
            if t._backward is None:
                continue
            if t.grad is not None:
                t._backward(t.grad)
                t.grad = None
            if free_graph:
                t._backward = None
                t._parents = ()

    def accumulate_grad(self, g, owned):
        """Add ``g`` to this tensor's grad; copy first unless ``owned``."""
        if self.grad is None:
            self.grad = g if owned else np.array(g)
        else:
            self.grad += g


@dataclass(frozen=True)
class GraphRecord:
    node_id: int
    op: str
    parent_ids: tuple


@dataclass(frozen=True)
class Graph:
    """Ordered tape of computation records; parents precede consumers."""

    nodes: tuple
    outputs: tuple

    def is_topologically_ordered(self):
        return all(p < rec.node_id for rec in self.nodes for p in rec.parent_ids)


class Parameter(Tensor):
    """A trainable tensor with persistent grad and momentum buffers."""

    __slots__ = ("momentum_buf",)

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.momentum_buf = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


def make_op(data, op, parents, backward_fn):
    """Wrap an op result, attaching the tape entry only when grads can flow."""
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out
