"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Node` handles in
creation order, so node ids are already a topological order. ``backward``
walks the ids downward once and accumulates adjoints by summation.

    tape = Tape()
    x = tape.variable(np.array(3.0))
    y = x * x
    grads = tape.backward(y)
    grads[x.id]  # -> 6.0
"""
import weakref

import numpy as np

from .errors import DomainError, NonScalarRoot, ShapeMismatch
from .special import digamma, lgamma as _lgamma


class Node:
    __slots__ = ("_tape", "id", "value", "op", "parents", "requires_grad", "aux")

    def __init__(self, tape, id, value, op, parents, requires_grad, aux=None):
        # weak, so a dropped tape is freed by refcounting rather than the cycle collector
        self._tape = weakref.ref(tape)
        self.id = id
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.aux = aux

    @property
    def tape(self):
        tape = self._tape()
        if tape is None:
            raise ValueError("the tape this node was recorded on no longer exists")
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a} with {b}") from None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tape:
    """Append-only record of nodes for one forward/backward pass."""

    def __init__(self):
        self.nodes = []
        self._vars = {}

    def __len__(self):
        return len(self.nodes)

    # -- recording ---------------------------------------------------------

    def record(self, op, inputs, value, aux=None):
        """Append a node computed by primitive ``op`` from ``inputs``."""
        for p in inputs:
            if p._tape() is not self or p.id >= len(self.nodes) or self.nodes[p.id] is not p:
                raise ValueError(f"{op}: input node is not on this tape")
        requires_grad = any(p.requires_grad for p in inputs)
        node = Node(self, len(self.nodes), value, op, tuple(inputs), requires_grad, aux)
        self.nodes.append(node)
        return node

    def constant(self, value):
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), value, "const", (), False)
        self.nodes.append(node)
        return node

    def variable(self, array):
        """Leaf node that tracks gradients.

        The same numpy array registered twice on one tape maps to one node,
        so a parameter shared across forward calls accumulates one gradient.
        """
        key = id(array)
        hit = self._vars.get(key)
        if hit is not None and hit[0] is array:
            return hit[1]
        value = np.asarray(array, dtype=np.float64)
        node = Node(self, len(self.nodes), value, "var", (), True)
        self.nodes.append(node)
        self._vars[key] = (array, node)
        return node

    def mark(self):
        """Checkpoint marker: the current node count."""
        return len(self.nodes)

    def truncate(self, marker):
        """Drop every node recorded after ``marker``."""
        del self.nodes[marker:]
        self._vars = {k: v for k, v in self._vars.items() if v[1].id < marker}

    def _lift(self, x):
        return x if isinstance(x, Node) else self.constant(x)

    # -- backward ----------------------------------------------------------

    def backward(self, root):
        """Adjoints of ``root`` with respect to every gradient-tracking node.

        Returns a dict keyed by node id.
        """
        if root.value.size != 1:
            raise NonScalarRoot(f"backward needs a scalar root, got shape {root.value.shape}")
        adj = {root.id: np.ones_like(root.value)}
        for i in range(root.id, -1, -1):
            g = adj.get(i)
            if g is None:
                continue
            node = self.nodes[i]
            if not node.parents:
                continue
            grads = _VJP[node.op](node, g)
            for p, pg in zip(node.parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = adj.get(p.id)
                adj[p.id] = pg if prev is None else prev + pg
        return {i: g for i, g in adj.items() if self.nodes[i].requires_grad}

    def grad(self, root, arrays):
        """Gradients of ``root`` for the given registered variable arrays."""
        adj = self.backward(root)
        out = []
        for a in arrays:
            hit = self._vars.get(id(a))
            if hit is None:
                out.append(np.zeros_like(a))
            else:
                out.append(adj.get(hit[1].id, np.zeros_like(a)))
        return out

    # -- elementwise binary -------------------------------------------------

    def _binary(self, op, a, b, fn):
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape(a.value.shape, b.value.shape, op)
        return self.record(op, (a, b), fn(a.value, b.value))

    def add(self, a, b):
        return self._binary("add", a, b, np.add)

    def sub(self, a, b):
        return self._binary("sub", a, b, np.subtract)

    def mul(self, a, b):
        return self._binary("mul", a, b, np.multiply)

    def div(self, a, b):
        return self._binary("div", a, b, np.divide)

    def matmul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
            raise ShapeMismatch(f"matmul: {a.value.shape} @ {b.value.shape}")
        return self.record("matmul", (a, b), a.value @ b.value)

    # -- elementwise unary ---------------------------------------------------

    def neg(self, x):
        return self.record("neg", (x,), -x.value)

    def scale(self, x, c):
        return self.record("scale", (x,), x.value * c, aux=float(c))

    def relu(self, x):
        return self.record("relu", (x,), np.maximum(x.value, 0.0))

    def softplus(self, x):
        return self.record("softplus", (x,), np.logaddexp(0.0, x.value))

    def exp(self, x):
        return self.record("exp", (x,), np.exp(x.value))

    def log(self, x):
        if np.any(x.value <= 0):
            raise DomainError("log of a non-positive value")
        return self.record("log", (x,), np.log(x.value))

    def square(self, x):
        return self.record("square", (x,), x.value * x.value)

    def sqrt(self, x):
        if np.any(x.value < 0):
            raise DomainError("sqrt of a negative value")
        return self.record("sqrt", (x,), np.sqrt(x.value))

    def abs(self, x):
        return self.record("abs", (x,), np.abs(x.value))

    def clamp_max(self, x, c):
        return self.record("clamp_max", (x,), np.minimum(x.value, c), aux=float(c))

    def lgamma(self, x):
        if np.any(x.value <= 0):
            raise DomainError("lgamma of a non-positive value")
        return self.record("lgamma", (x,), _lgamma(x.value))

    # -- reductions and structure -------------------------------------------

    def sum(self, x, axis=None, keepdims=False):
        return self.record("sum", (x,), np.sum(x.value, axis=axis, keepdims=keepdims),
                           aux=(axis, keepdims))

    def mean(self, x, axis=None, keepdims=False):
        return self.record("mean", (x,), np.mean(x.value, axis=axis, keepdims=keepdims),
                           aux=(axis, keepdims))

    def min(self, x, axis=-1):
        """Minimum along ``axis``; the gradient goes to the first argmin."""
        idx = np.argmin(x.value, axis=axis)
        value = np.take_along_axis(x.value, np.expand_dims(idx, axis), axis=axis)
        return self.record("min", (x,), np.squeeze(value, axis=axis), aux=(axis, idx))

    def concat(self, xs):
        """Concatenate along the last axis."""
        xs = [self._lift(x) for x in xs]
        lead = xs[0].value.shape[:-1]
        for x in xs[1:]:
            if x.value.shape[:-1] != lead:
                raise ShapeMismatch(f"concat: leading shapes {lead} vs {x.value.shape[:-1]}")
        sizes = [x.value.shape[-1] for x in xs]
        return self.record("concat", tuple(xs), np.concatenate([x.value for x in xs], axis=-1),
                           aux=sizes)

    def slice_last(self, x, start, stop):
        n = x.value.shape[-1]
        if not 0 <= start < stop <= n:
            raise ShapeMismatch(f"slice_last: [{start}:{stop}] out of range for extent {n}")
        return self.record("slice_last", (x,), x.value[..., start:stop], aux=(start, stop))

    def take_rows(self, x, index):
        """Gather rows ``x[index]`` along the first axis."""
        index = np.asarray(index, dtype=np.intp)
        if index.size and (index.min() < 0 or index.max() >= x.value.shape[0]):
            raise ShapeMismatch("take_rows: index out of range")
        return self.record("take_rows", (x,), x.value[index], aux=index)


# -- adjoint rules ------------------------------------------------------------
# Each takes (node, upstream grad) and returns one grad (or None) per parent.

def _vjp_add(n, g):
    a, b = n.parents
    return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)


def _vjp_sub(n, g):
    a, b = n.parents
    return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)


def _vjp_mul(n, g):
    a, b = n.parents
    ga = _unbroadcast(g * b.value, a.value.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.value, b.value.shape) if b.requires_grad else None
    return ga, gb


def _vjp_div(n, g):
    a, b = n.parents
    ga = _unbroadcast(g / b.value, a.value.shape) if a.requires_grad else None
    gb = _unbroadcast(-g * n.value / b.value, b.value.shape) if b.requires_grad else None
    return ga, gb


def _vjp_matmul(n, g):
    a, b = n.parents
    ga = g @ b.value.T if a.requires_grad else None
    gb = a.value.T @ g if b.requires_grad else None
    return ga, gb


def _vjp_reduce(n, g):
    (x,) = n.parents
    axis, keepdims = n.aux
    shape = x.value.shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    g = np.broadcast_to(g, shape)
    if n.op == "mean":
        count = x.value.size if axis is None else shape[axis]
        g = g / count
    return (np.array(g),)


def _vjp_min(n, g):
    (x,) = n.parents
    axis, idx = n.aux
    out = np.zeros_like(x.value)
    np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return (out,)


def _vjp_concat(n, g):
    out = []
    start = 0
    for size in n.aux:
        out.append(g[..., start:start + size])
        start += size
    return tuple(out)


def _vjp_slice_last(n, g):
    (x,) = n.parents
    start, stop = n.aux
    out = np.zeros_like(x.value)
    out[..., start:stop] = g
    return (out,)


def _vjp_take_rows(n, g):
    (x,) = n.parents
    out = np.zeros_like(x.value)
    np.add.at(out, n.aux, g)
    return (out,)


def _unary(rule):
    def vjp(n, g):
        return (rule(n, n.parents[0].value, g),)
    return vjp


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "matmul": _vjp_matmul,
    "sum": _vjp_reduce,
    "mean": _vjp_reduce,
    "min": _vjp_min,
    "concat": _vjp_concat,
    "slice_last": _vjp_slice_last,
    "take_rows": _vjp_take_rows,
    "neg": _unary(lambda n, x, g: -g),
    "scale": _unary(lambda n, x, g: g * n.aux),
    # gradient 0 at exactly x == 0
    "relu": _unary(lambda n, x, g: g * (x > 0)),
    "softplus": _unary(lambda n, x, g: g * _sigmoid(x)),
    "exp": _unary(lambda n, x, g: g * n.value),
    "log": _unary(lambda n, x, g: g / x),
    "square": _unary(lambda n, x, g: 2.0 * g * x),
    "sqrt": _unary(lambda n, x, g: 0.5 * g / n.value),
    "abs": _unary(lambda n, x, g: g * np.sign(x)),
    "clamp_max": _unary(lambda n, x, g: g * (x < n.aux)),
    "lgamma": _unary(lambda n, x, g: g * digamma(x)),
}
