"""Dense float64 tensors and the tape they record onto.

Gradients are computed by reverse-mode differentiation over an explicit,
append-only tape (`Graph`): every operation executed while a graph is
active appends one node, and `backward` walks the node list in exact
reverse append order. Because inputs always precede the node that
consumes them, reverse append order is a valid topological order.

Leaf tensors created with ``requires_grad=True`` (parameters) accumulate
into their persistent ``.grad`` buffer; intermediate gradients live only
for the duration of one backward walk, so repeated ``backward`` calls on
the same graph accumulate parameter gradients without double-counting
interior paths.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


class Tensor:
    """A dense float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._graph: Graph | None = None  # graph that produced this tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class OpNode:
    """One tape record: operation kind, inputs, output, and a backward rule.

    ``bwd(gout)`` returns one gradient array (or None) per input, aligned
    with ``inputs``.
    """

    __slots__ = ("kind", "inputs", "out", "bwd")

    def __init__(self, kind, inputs, out, bwd):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Graph:
    """Append-only operation tape; at most one graph is active at a time."""

    _active: Graph | None = None

    def __init__(self):
        self.nodes: list[OpNode] = []

    def __enter__(self) -> Graph:
        if Graph._active is not None:
            raise ContractError("graphs do not nest")
        Graph._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Graph._active = None
        return False

    @staticmethod
    def active() -> Graph | None:
        return Graph._active

    def record(self, kind, inputs, out: Tensor, bwd):
        out._graph = self
        self.nodes.append(OpNode(kind, tuple(inputs), out, bwd))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) into every reachable parameter's .grad."""
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if loss._graph is not self:
            raise ContractError("loss was not produced on this graph")
        # Upstream gradients for this walk only; keyed by tensor identity.
        walk: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = walk.pop(id(node.out), None)
            if gout is None:
                continue
            gins = node.bwd(gout)
            for t, g in zip(node.inputs, gins):
                if g is None:
                    continue
                if t.requires_grad:
                    t.accumulate_grad(g)
                elif t._graph is self:
                    key = id(t)
                    if key in walk:
                        walk[key] = walk[key] + g
                    else:
                        walk[key] = g


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar loss tensor."""
    if loss._graph is None:
        raise ContractError("loss was not produced on a graph")
    loss._graph.backward(loss)


def participates(t: Tensor) -> bool:
    """True when `t` must be tracked on the active graph."""
    return t.requires_grad or (t._graph is not None and t._graph is Graph._active)


def zero_grads(params):
    for p in params:
        p.zero_grad()
