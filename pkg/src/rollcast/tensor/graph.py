"""Recorded computation graphs with reverse-mode differentiation.

A :class:`Graph` is built once from symbolic :class:`Node` objects (inputs,
parameters, constants and primitive applications), then evaluated any number
of times with :func:`forward_eval` and differentiated with
:func:`backward_grad`.  Every value is a float64 ``numpy`` array; arrays are
never mutated after they are produced.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np


class GraphError(Exception):
    """Raised for malformed graphs, unbound leaves and misuse of the API."""


class GraphShapeError(GraphError):
    """A primitive received operands whose shapes it cannot combine."""

    def __init__(self, node_label, detail):
        super().__init__(f"shape error at node {node_label!r}: {detail}")
        self.node = node_label


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable


PRIMITIVES = {}


def _register(name, forward, backward):
    PRIMITIVES[name] = Primitive(name, forward, backward)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _matmul_backward(g, out, a, b):
    ga = g @ _swap(b)
    gb = _swap(a) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _max_backward(g, out, a, axis=None, keepdims=False):
    mask = (a == _expand_reduced(out, a.shape, axis, keepdims)).astype(np.float64)
    mask /= mask.sum(axis=axis, keepdims=True)
    return (mask * _expand_reduced(g, a.shape, axis, keepdims),)


def _getitem_backward(g, out, a, key):
    ga = np.zeros_like(a)
    np.add.at(ga, key, g)
    return (ga,)


def _concat_backward(g, out, *parts, axis):
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


_register("add", lambda a, b: a + b, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_register("sub", lambda a, b: a - b, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_register("mul", lambda a, b: a * b, lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
_register(
    "div",
    lambda a, b: a / b,
    lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * o / b, b.shape)),
)
_register("neg", lambda a: -a, lambda g, o, a: (-g,))
_register(
    "pow",
    lambda a, exponent: a**exponent,
    lambda g, o, a, exponent: (g * exponent * a ** (exponent - 1),),
)
_register("exp", np.exp, lambda g, o, a: (g * o,))
_register("log", np.log, lambda g, o, a: (g / a,))
_register("sqrt", np.sqrt, lambda g, o, a: (g / (2.0 * o),))
_register("tanh", np.tanh, lambda g, o, a: (g * (1.0 - o * o),))
_register("matmul", np.matmul, _matmul_backward)
_register(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    lambda g, o, a, axis=None, keepdims=False: (_expand_reduced(g, a.shape, axis, keepdims),),
)
_register(
    "mean",
    lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
    lambda g, o, a, axis=None, keepdims=False: (_expand_reduced(g, a.shape, axis, keepdims) * (o.size / a.size),),
)
_register("max", lambda a, axis=None, keepdims=False: np.max(a, axis=axis, keepdims=keepdims), _max_backward)
_register("reshape", lambda a, shape: np.reshape(a, shape), lambda g, o, a, shape: (np.reshape(g, a.shape),))
_register(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    lambda g, o, a, axes: (np.transpose(g, np.argsort(axes)),),
)
_register("concat", lambda *parts, axis: np.concatenate(parts, axis=axis), _concat_backward)
_register("getitem", lambda a, key: a[key], _getitem_backward)
_register("stop_gradient", lambda a: a, lambda g, o, a: (None,))


class Node:
    """Symbolic handle on one value of a :class:`Graph`."""

    __slots__ = ("graph", "index", "op", "parents", "attrs", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, graph, index, op, parents, attrs, name):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.name = name

    @property
    def label(self):
        return self.name or f"{self.op}#{self.index}"

    def __repr__(self):
        return f"Node({self.label})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.apply("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph.apply("div", self._lift(other), self)

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __pow__(self, exponent):
        return self.graph.apply("pow", self, exponent=float(exponent))

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, self._lift(other))

    def __getitem__(self, key):
        return self.graph.apply("getitem", self, key=key)

    def sum(self, axis=None, keepdims=False):
        return self.graph.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.graph.apply("mean", self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return self.graph.apply("max", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return self.graph.apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return self.graph.apply("transpose", self, axes=tuple(axes))

    @property
    def value(self):
        return self.graph.value(self)


class Graph:
    """An append-only list of nodes in topological (creation) order."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.outputs = {}
        self._values = None

    def _add(self, op, parents=(), attrs=None, name=None):
        node = Node(self, len(self.nodes), op, tuple(parents), attrs or {}, name)
        self.nodes.append(node)
        self._values = None
        return node

    def _leaf(self, kind, name):
        if name in self.leaves:
            leaf = self.leaves[name]
            if leaf.op != kind:
                raise GraphError(f"leaf {name!r} already declared as {leaf.op}")
            return leaf
        leaf = self._add(kind, name=name)
        self.leaves[name] = leaf
        return leaf

    def input(self, name):
        return self._leaf("input", name)

    def param(self, name):
        return self._leaf("param", name)

    def const(self, value, name=None):
        return self._add("const", attrs={"value": np.asarray(value, dtype=np.float64)}, name=name)

    def apply(self, op, *parents, name=None, **attrs):
        if op not in PRIMITIVES:
            raise GraphError(f"unknown primitive {op!r}")
        for p in parents:
            if not isinstance(p, Node) or p.graph is not self:
                raise GraphError(f"operand of {op} does not belong to this graph")
        return self._add(op, parents, attrs, name)

    def output(self, name, node):
        self.outputs[name] = node
        return node

    @property
    def param_names(self):
        return [n for n, leaf in self.leaves.items() if leaf.op == "param"]

    # functional helpers --------------------------------------------------
    def tanh(self, x):
        return self.apply("tanh", x)

    def exp(self, x):
        return self.apply("exp", x)

    def log(self, x):
        return self.apply("log", x)

    def sqrt(self, x):
        return self.apply("sqrt", x)

    def concat(self, parts, axis=-1):
        return self.apply("concat", *parts, axis=axis)

    def stop_gradient(self, x, name=None):
        return self.apply("stop_gradient", x, name=name)

    def softmax(self, x, axis=-1):
        shifted = x - self.stop_gradient(x.max(axis=axis, keepdims=True))
        e = self.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    def layer_norm(self, x, eps=1e-5):
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / self.sqrt(var + eps)

    # evaluation state ----------------------------------------------------
    @property
    def evaluated(self):
        return self._values is not None

    def value(self, node):
        if self._values is None:
            raise GraphError("graph has not been evaluated")
        return self._values[node.index]


def _last_uses(graph):
    """Per node, the indices of values whose final consumer it is."""
    last = {}
    for node in graph.nodes:
        for p in node.parents:
            last[p.index] = node.index
    for n in graph.outputs.values():
        last[n.index] = len(graph.nodes)
    freed = [[] for _ in graph.nodes]
    for index, user in last.items():
        if user < len(graph.nodes):
            freed[user].append(index)
    return freed


def forward_eval(graph, inputs, keep=True):
    """Evaluate every node; ``inputs`` maps leaf names to arrays.

    Returns the values of the graph's named outputs.  With ``keep=False``
    intermediates are dropped after their last use, which bounds memory for
    gradient-free evaluation but leaves the graph unevaluated.
    """
    vals = [None] * len(graph.nodes)
    freed = None if keep else _last_uses(graph)
    for node in graph.nodes:
        op = node.op
        if op == "input" or op == "param":
            if node.name not in inputs:
                raise GraphError(f"leaf {node.name!r} is not bound")
            vals[node.index] = np.asarray(inputs[node.name], dtype=np.float64)
            continue
        if op == "const":
            vals[node.index] = node.attrs["value"]
            continue
        args = [vals[p.index] for p in node.parents]
        try:
            vals[node.index] = PRIMITIVES[op].forward(*args, **node.attrs)
        except (ValueError, IndexError, TypeError) as exc:
            shapes = ", ".join(str(a.shape) for a in args)
            raise GraphShapeError(node.label, f"{op}({shapes}): {exc}") from None
        if freed is not None:
            for index in freed[node.index]:
                vals[index] = None
    graph._values = vals if keep else None
    return {name: vals[n.index] for name, n in graph.outputs.items()}


def backward_grad(graph, output, wrt=None, seed=None, release=False):
    """Reverse-mode gradient of ``output`` with respect to named leaves.

    ``wrt`` defaults to every parameter leaf; unreachable leaves get zeros.
    ``seed`` is the output cotangent and may only be omitted for scalars.
    ``release=True`` drops each forward value once no later backward rule
    needs it, which lowers peak memory but leaves the graph unevaluated.
    """
    if graph._values is None:
        raise GraphError("backward_grad requested before forward_eval")
    if isinstance(output, str):
        output = graph.outputs[output]
    vals = graph._values
    out_val = vals[output.index]
    if seed is None:
        if out_val.size != 1:
            raise GraphError(f"output {output.label!r} is not scalar; pass a seed")
        seed = np.ones_like(out_val)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out_val.shape:
        raise GraphError(f"seed shape {seed.shape} != output shape {out_val.shape}")

    names = graph.param_names if wrt is None else list(wrt)
    targets = set()
    for n in names:
        if n not in graph.leaves:
            raise GraphError(f"no leaf named {n!r}")
        targets.add(graph.leaves[n].index)

    live = [False] * (output.index + 1)
    for node in graph.nodes[: output.index + 1]:
        if node.index in targets:
            live[node.index] = True
        elif node.op != "stop_gradient" and node.parents:
            live[node.index] = any(live[p.index] for p in node.parents)

    grads = {output.index: seed}
    for node in reversed(graph.nodes[: output.index + 1]):
        g = grads.get(node.index)
        if g is None or not live[node.index] or not node.parents:
            continue
        args = [vals[p.index] for p in node.parents]
        pgrads = PRIMITIVES[node.op].backward(g, vals[node.index], *args, **node.attrs)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not live[p.index]:
                continue
            prev = grads.get(p.index)
            grads[p.index] = pg if prev is None else prev + pg
        if node.index not in targets:
            del grads[node.index]
        if release and node.parents:
            vals[node.index] = None

    result = {}
    for n in names:
        leaf = graph.leaves[n]
        g = grads.get(leaf.index)
        result[n] = np.zeros_like(vals[leaf.index]) if g is None else np.array(g)
    if release:
        graph._values = None
    return result
