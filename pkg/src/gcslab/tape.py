"""Minimal reverse-mode recorder for the loss graphs.

Loss formulas are written once with ordinary arithmetic.  Called with numpy
arrays they just compute; called with :class:`Node` inputs they also record
vector-Jacobian products so a gradient can be pulled back to the leaf.

Only the operations the distillation losses need are supported: affine
combinations with scalar coefficients, and opaque nonlinear maps (teacher
noise prediction, decoder) registered through :meth:`Tape.apply`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class Node:
    __slots__ = ("tape", "value", "parents", "index")
    __array_ufunc__ = None  # make numpy scalars defer to our reflected ops

    def __init__(self, tape: "Tape", value: np.ndarray, parents):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ValueError("cannot mix nodes from different tapes")
            return other
        return None

    def __add__(self, other):
        o = self._lift(other)
        if o is None:
            return Node(self.tape, self.value + other, [(self, _identity)])
        return Node(self.tape, self.value + o.value, [(self, _identity), (o, _identity)])

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        if o is None:
            return Node(self.tape, self.value - other, [(self, _identity)])
        return Node(self.tape, self.value - o.value, [(self, _identity), (o, _negate)])

    def __rsub__(self, other):
        return Node(self.tape, other - self.value, [(self, _negate)])

    def __neg__(self):
        return Node(self.tape, -self.value, [(self, _negate)])

    def __mul__(self, k):
        if isinstance(k, Node) or np.ndim(k) != 0:
            raise TypeError("nodes only support scaling by Python/numpy scalars")
        k = float(k)
        return Node(self.tape, k * self.value, [(self, lambda g: k * g)])

    __rmul__ = __mul__

    def __truediv__(self, k):
        if isinstance(k, Node) or np.ndim(k) != 0:
            raise TypeError("nodes only support division by scalars")
        k = float(k)
        return Node(self.tape, self.value / k, [(self, lambda g: g / k)])


def _identity(g):
    return g


def _negate(g):
    return -g


class Tape:
    """Records nodes in creation order; backward walks them in reverse.

    ``frozen`` names opaque ops (e.g. ``"eps"``) whose inputs receive no
    gradient, which is how the stop-gradient contract on the teacher is
    expressed.
    """

    def __init__(self, frozen: frozenset[str] | set[str] = frozenset()):
        self.nodes: list[Node] = []
        self.frozen = frozenset(frozen)

    def leaf(self, value) -> Node:
        return Node(self, np.array(value, dtype=np.float64), [])

    def apply(self, kind: str, x: Node, value: np.ndarray,
              vjp: Callable[[np.ndarray], np.ndarray]) -> Node:
        parents = [] if kind in self.frozen else [(x, vjp)]
        return Node(self, value, parents)

    def backward(self, seeds, wrt: Node) -> np.ndarray:
        grads: dict[int, np.ndarray] = {}
        for node, g in seeds:
            g = np.asarray(g, dtype=np.float64)
            grads[node.index] = grads[node.index] + g if node.index in grads else g
        for node in reversed(self.nodes[wrt.index:]):
            g = grads.pop(node.index, None) if node is not wrt else grads.get(node.index)
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + contrib
                else:
                    grads[parent.index] = contrib
        out = grads.get(wrt.index)
        return np.zeros_like(wrt.value) if out is None else out


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else x
