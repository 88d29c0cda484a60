"""Reverse-mode autodiff over float64 numpy arrays.

A Tape records Nodes in construction order; reversing that order is a
topological order of the computation graph, so one backward sweep with
gradient accumulation (+=) handles arbitrary fan-out. Every op accepts
either plain ndarrays or Nodes and returns the matching kind, so model
code is written once and runs both as a fast untaped forward pass and as
a recorded computation whose scalar output can be differentiated. Both
modes execute identical float operations, which is what makes sampled
log-probabilities agree bitwise with their taped counterparts.

Gradients are dense float64 arrays of the same shape as the value. The
backward sweep is sequential and deterministic: same program, same
gradients, bit for bit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from ..errors import UsageError
from .params import ParamStore


class Tape:
    """Ordered record of one computation; differentiate with backward()."""

    __slots__ = ("nodes", "leaves", "_spent")

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self._spent = False

    def leaf(self, name: str, value: np.ndarray) -> "Node":
        """Register a named differentiable input."""
        if name in self.leaves:
            raise UsageError(f"duplicate leaf name {name!r}")
        node = Node(np.asarray(value, dtype=np.float64), self)
        self.leaves[name] = node
        return node

    def backward(self, root: "Node") -> None:
        """Seed d(root)/d(root) = 1 and sweep the tape in reverse order."""
        if root.tape is not self:
            raise UsageError("root node was recorded on a different tape")
        if np.shape(root.val) != ():
            raise UsageError("backward requires a scalar root")
        if self._spent:
            raise UsageError("tape already differentiated; record a fresh one")
        self._spent = True
        _accum(root, np.float64(1.0))
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def leaf_grads(self, params: ParamStore) -> ParamStore:
        """Collect gradients for every name in params (zeros if untouched)."""
        out = ParamStore()
        for name, value in params.items():
            node = self.leaves.get(name)
            if node is None or node.grad is None:
                out.add(name, np.zeros_like(value))
            else:
                out.add(name, np.asarray(node.grad, dtype=np.float64))
        return out


class Node:
    """One recorded value; grad filled during the backward sweep."""

    __slots__ = ("val", "tape", "grad", "_backward")

    def __init__(self, val, tape: Tape) -> None:
        self.val = val
        self.tape = tape
        self.grad = None
        self._backward: Callable | None = None
        tape.nodes.append(self)

    # Arithmetic sugar; non-Node operands are constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Node(shape={np.shape(self.val)})"


def value_of(x):
    """Underlying ndarray of a Node, or x itself."""
    return x.val if isinstance(x, Node) else x


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _accum(node: Node, g) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if np.shape(g) == shape:
        return g
    extra = np.ndim(g) - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and np.shape(g)[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out_val = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_val
    out = Node(out_val, tape)

    def backward(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g, np.shape(a.val)))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(g, np.shape(b.val)))

    out._backward = backward
    return out


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out_val = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_val
    out = Node(out_val, tape)

    def backward(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g, np.shape(a.val)))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(-g, np.shape(b.val)))

    out._backward = backward
    return out


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out_val = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_val
    out = Node(out_val, tape)

    def backward(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g * bv, np.shape(a.val)))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(g * av, np.shape(b.val)))

    out._backward = backward
    return out


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out_val = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_val
    out = Node(out_val, tape)

    def backward(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g / bv, np.shape(a.val)))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(-g * av / (bv * bv), np.shape(b.val)))

    out._backward = backward
    return out


def _unary(x, fn, dfn):
    xv = value_of(x)
    out_val = fn(xv)
    if not isinstance(x, Node):
        return out_val
    out = Node(out_val, x.tape)

    def backward(g, _x=x, _y=out_val, _xv=xv):
        _accum(_x, g * dfn(_xv, _y))

    out._backward = backward
    return out


def tanh(x):
    return _unary(x, np.tanh, lambda xv, y: 1.0 - y * y)


def exp(x):
    return _unary(x, np.exp, lambda xv, y: y)


def log(x):
    return _unary(x, np.log, lambda xv, y: 1.0 / xv)


def sigmoid(x):
    # exp(-softplus(-x)) is stable on both tails
    return _unary(
        x,
        lambda v: np.exp(-np.logaddexp(0.0, -v)),
        lambda xv, y: y * (1.0 - y),
    )


def softplus(x):
    return _unary(
        x,
        lambda v: np.logaddexp(0.0, v),
        lambda xv, y: np.exp(-np.logaddexp(0.0, -xv)),
    )


def square(x):
    return mul(x, x)


def sum_all(x):
    xv = value_of(x)
    out_val = np.sum(xv)
    if not isinstance(x, Node):
        return out_val
    out = Node(out_val, x.tape)

    def backward(g):
        _accum(x, np.broadcast_to(g, np.shape(x.val)).copy())

    out._backward = backward
    return out


def sum_nodes(terms: Iterable):
    """Left-to-right sum of scalars/Nodes (deterministic association)."""
    terms = list(terms)
    if not terms:
        raise UsageError("sum_nodes needs at least one term")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------------------
# linear algebra and structural ops


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    na, nb = np.ndim(av), np.ndim(bv)
    if na not in (1, 2) or nb not in (1, 2):
        raise UsageError("matmul supports 1-D and 2-D operands only")
    out_val = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_val
    out = Node(out_val, tape)

    def backward(g):
        if na == 2 and nb == 1:  # (m,n)@(n,) -> (m,)
            if isinstance(a, Node):
                _accum(a, np.outer(g, bv))
            if isinstance(b, Node):
                _accum(b, av.T @ g)
        elif na == 1 and nb == 2:  # (n,)@(n,k) -> (k,)
            if isinstance(a, Node):
                _accum(a, bv @ g)
            if isinstance(b, Node):
                _accum(b, np.outer(av, g))
        elif na == 2 and nb == 2:  # (m,n)@(n,k) -> (m,k)
            if isinstance(a, Node):
                _accum(a, g @ bv.T)
            if isinstance(b, Node):
                _accum(b, av.T @ g)
        else:  # (n,)@(n,) -> scalar
            if isinstance(a, Node):
                _accum(a, g * bv)
            if isinstance(b, Node):
                _accum(b, g * av)

    out._backward = backward
    return out


def concat(parts):
    parts = list(parts)
    vals = [np.atleast_1d(value_of(p)) for p in parts]
    out_val = np.concatenate(vals)
    tape = _tape_of(*parts)
    if tape is None:
        return out_val
    out = Node(out_val, tape)
    sizes = [v.shape[0] for v in vals]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            if isinstance(p, Node):
                _accum(p, g[off : off + n])
            off += n

    out._backward = backward
    return out


def stack_rows(parts):
    parts = list(parts)
    vals = [value_of(p) for p in parts]
    out_val = np.stack(vals)
    tape = _tape_of(*parts)
    if tape is None:
        return out_val
    out = Node(out_val, tape)

    def backward(g):
        for i, p in enumerate(parts):
            if isinstance(p, Node):
                _accum(p, g[i])

    out._backward = backward
    return out


def row(mat, i: int):
    """Row i of a matrix; backward scatter-adds into that row."""
    mv = value_of(mat)
    out_val = mv[i]
    if not isinstance(mat, Node):
        return out_val
    out = Node(out_val, mat.tape)

    def backward(g):
        if mat.grad is None:
            mat.grad = np.zeros_like(mat.val)
        mat.grad[i] += g

    out._backward = backward
    return out


def element(vec, i: int):
    """Scalar element i of a vector; backward scatters into that slot."""
    vv = value_of(vec)
    out_val = vv[i]
    if not isinstance(vec, Node):
        return out_val
    out = Node(out_val, vec.tape)

    def backward(g):
        if vec.grad is None:
            vec.grad = np.zeros_like(vec.val)
        vec.grad[i] += g

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# normalizing transforms


def _softmax_raw(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - np.max(v))
    return e / e.sum()


def _log_softmax_raw(v: np.ndarray) -> np.ndarray:
    s = v - np.max(v)
    return s - np.log(np.sum(np.exp(s)))


def softmax(x):
    xv = value_of(x)
    out_val = _softmax_raw(xv)
    if not isinstance(x, Node):
        return out_val
    out = Node(out_val, x.tape)

    def backward(g, y=out_val):
        _accum(x, y * (g - np.dot(g, y)))

    out._backward = backward
    return out


def log_softmax(x):
    xv = value_of(x)
    out_val = _log_softmax_raw(xv)
    if not isinstance(x, Node):
        return out_val
    out = Node(out_val, x.tape)

    def backward(g, y=out_val):
        _accum(x, g - np.exp(y) * np.sum(g))

    out._backward = backward
    return out


def softmax_stable(v) -> np.ndarray:
    """Public max-shifted softmax over a 1-D array (validates input)."""
    v = np.asarray(value_of(v), dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise UsageError("softmax_stable expects a non-empty 1-D array")
    if not np.all(np.isfinite(np.maximum(v, -1e300))):  # allow -inf masks
        raise UsageError("softmax_stable input has NaN or +inf entries")
    return _softmax_raw(v)


def logsumexp(v) -> float:
    """Max-shifted log-sum-exp of a non-empty 1-D array."""
    v = np.asarray(value_of(v), dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise UsageError("logsumexp expects a non-empty 1-D array")
    m = np.max(v)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


# ---------------------------------------------------------------------------
# programs


def eval_with_grad(program, params: ParamStore, *inputs):
    """Run `program(leaves, *inputs)` taped; return (value, grads).

    `program` receives a mapping name -> Node and must return a scalar
    Node. Gradients come back as a ParamStore shape-compatible with
    `params`, zeros for parameters the program never touched.
    """
    tape = Tape()
    leaves: Mapping[str, Node] = {
        name: tape.leaf(name, value) for name, value in params.items()
    }
    out = program(leaves, *inputs)
    if not isinstance(out, Node):
        raise UsageError("program returned a constant; nothing to differentiate")
    if np.shape(out.val) != ():
        raise UsageError("program must return a scalar")
    tape.backward(out)
    return float(out.val), tape.leaf_grads(params)


def eval_value(program, params, *inputs) -> float:
    """Run `program` untaped (params as plain arrays) and return a float."""
    out = program(params, *inputs)
    return float(value_of(out))
