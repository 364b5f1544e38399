"""Reverse-mode differentiation over a fixed primitive vocabulary.

The graph is built from the constructors in :mod:`monosplat.numerics.ops`
(add, mul, matmul, conv2d, bilinear_sample, softmax_last, concat, slicing,
relu, sigmoid, exp, normalize, weighted-sum reductions) plus zero-cost
structural moves (reshape, transpose). Anything else must be composed from
these. Node values are float32; gradients accumulate in float64 and are
rounded to float32 when written into ``Parameter.grad``.

Frozen parameters are never written to during backward.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Parameter, as_tensor


class Node:
    """One value in the computation graph.

    ``parents`` is a tuple of ``(parent_node, vjp)`` pairs where ``vjp`` maps
    the float64 cotangent of this node to the parent's cotangent.
    """

    __slots__ = ("value", "parents", "param", "op", "aux")

    def __init__(self, value, parents=(), param: Parameter | None = None, op: str = ""):
        self.value = value
        self.parents = tuple(parents)
        self.param = param
        self.op = op
        self.aux = None  # op-specific extras, e.g. float64 scalar of a reduction

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op or 'leaf'}, shape={self.value.shape})"

    # Sugar for readable model code; all route through ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def constant(arr) -> Node:
    """Wrap an array as a graph constant (no gradient flows into it)."""
    from . import tensor as _tensor

    if _tensor._PRECISE:
        return Node(np.asarray(arr, dtype=np.float64), op="const")
    return Node(as_tensor(arr), op="const")


def leaf(param: Parameter) -> Node:
    """Wrap a Parameter as a graph leaf."""
    from . import tensor as _tensor

    if _tensor._PRECISE:
        return Node(param.value.astype(np.float64), param=param, op="param")
    return Node(param.value, param=param, op="param")


class UnsupportedPrimitiveError(RuntimeError):
    """Backward met a node without a usable vjp."""


def _toposort(seeds) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(n, False) for n in seeds]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward_from(nodes, cotangents) -> None:
    """Propagate externally supplied cotangents back to trainable Parameters.

    Accumulates into ``Parameter.grad`` (adds onto existing contents; call
    ``zero_grad`` first for a fresh pass). Used to stitch non-graph gradient
    producers, e.g. the splatting rasterizer, into a network graph.
    """
    nodes = list(nodes)
    cotangents = list(cotangents)
    if len(nodes) != len(cotangents):
        raise ValueError("nodes and cotangents length mismatch")
    grads: dict[int, np.ndarray] = {}
    for node, cot in zip(nodes, cotangents):
        g = np.asarray(cot, dtype=np.float64)
        if g.shape != node.value.shape:
            raise ValueError(f"cotangent shape {g.shape} != node shape {node.value.shape}")
        if id(node) in grads:
            grads[id(node)] = grads[id(node)] + g
        else:
            grads[id(node)] = g.copy()

    order = _toposort(nodes)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            if node.param.trainable:
                node.param.grad += g.astype(DTYPE)
            continue
        for parent, vjp in node.parents:
            if vjp is None:
                raise UnsupportedPrimitiveError(f"no vjp for op {node.op!r}")
            pg = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def scalar_value(node: Node) -> float:
    """Scalar node value at full reduction precision (float64 when kept)."""
    if node.value.size != 1:
        raise ValueError("scalar_value needs a scalar node")
    if node.aux is not None:
        return float(node.aux)
    return float(node.value.reshape(-1)[0])


def backward(loss: Node) -> None:
    """Reverse-mode pass from a scalar loss node.

    Raises ValueError when called on a non-scalar output.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    backward_from([loss], [np.ones_like(loss.value, dtype=np.float64)])


def collect_parameters(node: Node) -> list[Parameter]:
    """All distinct Parameters reachable from ``node`` (graph order)."""
    params: list[Parameter] = []
    seen: set[int] = set()
    for n in _toposort([node]):
        if n.param is not None and id(n.param) not in seen:
            seen.add(id(n.param))
            params.append(n.param)
    return params
