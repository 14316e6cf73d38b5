"""Reverse-mode automatic differentiation over scalars and fixed-shape vectors.

Every operation returns a new :class:`Node` that records its parents together
with the local partial derivative of the output with respect to each parent.
Node ids come from a single monotonically increasing counter, so a parent's id
is always smaller than its child's and sorting reachable nodes by id is a valid
topological order.

Gradient propagation uses one rule for every edge::

    grad[parent] += grad[child] * local        (summed if parent is a scalar)

which covers elementwise ops, reductions (``logsumexp``, ``index``) and the
scalar/vector mixing used by ``stack``.

Example:
    >>> p = make_param(3.0)
    >>> grads = backward(p * p)
    >>> grads[p.id]
    6.0
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

Value = Union[float, np.ndarray]

_ids = itertools.count()


class DomainError(ValueError):
    """An operation was applied outside its mathematical domain."""


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    value: Value
    parents: tuple  # tuple of (Node, local partial)
    op: str
    is_param: bool = False

    @property
    def shape(self) -> tuple:
        v = self.value
        return v.shape if isinstance(v, np.ndarray) else ()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        kind = "param" if self.is_param else self.op
        return f"Node(id={self.id}, value={self.value!r}, op={kind})"


GradientMap = dict  # node id -> gradient (float or ndarray)


def _check_finite(value: Value, op: str) -> None:
    if type(value) is float:
        if not math.isfinite(value):
            raise DomainError(f"{op}: non-finite value {value!r}")
    elif isinstance(value, np.ndarray):
        if not np.all(np.isfinite(value)):
            raise DomainError(f"{op}: non-finite value")
    elif not math.isfinite(value):
        raise DomainError(f"{op}: non-finite value {value!r}")


def _as_value(value) -> Value:
    # longdouble inputs keep their precision (used by the numeric side of
    # finite_diff_check); everything else is coerced to float64
    if isinstance(value, np.ndarray):
        return np.array(value, dtype=np.longdouble if value.dtype == np.longdouble else float)
    if isinstance(value, np.longdouble):
        return value
    return float(value)


def _node(value: Value, parents: tuple, op: str, is_param: bool = False) -> Node:
    _check_finite(value, op)
    return Node(next(_ids), value, parents, op, is_param)


def make_param(value) -> Node:
    """A leaf that is a gradient target."""
    return _node(_as_value(value), (), "param", is_param=True)


def make_const(value) -> Node:
    """A leaf that never receives a gradient."""
    return _node(_as_value(value), (), "const")


def lift(x) -> Node:
    return x if isinstance(x, Node) else make_const(x)


def _check_shapes(a: Node, b: Node, op: str) -> None:
    if not (isinstance(a.value, np.ndarray) and isinstance(b.value, np.ndarray)):
        return
    sa, sb = a.shape, b.shape
    if sa != sb:
        raise ValueError(f"{op}: shape mismatch {sa} vs {sb}")


# --- elementary operations ---------------------------------------------------


def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    _check_shapes(a, b, "add")
    return _node(a.value + b.value, ((a, 1.0), (b, 1.0)), "add")


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    _check_shapes(a, b, "sub")
    return _node(a.value - b.value, ((a, 1.0), (b, -1.0)), "sub")


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    _check_shapes(a, b, "mul")
    return _node(a.value * b.value, ((a, b.value), (b, a.value)), "mul")


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    _check_shapes(a, b, "div")
    if np.any(np.asarray(b.value) == 0.0):
        raise DomainError("div: division by zero")
    out = a.value / b.value
    return _node(out, ((a, 1.0 / b.value), (b, -out / b.value)), "div")


def neg(a) -> Node:
    a = lift(a)
    return _node(-a.value, ((a, -1.0),), "neg")


def square(a) -> Node:
    a = lift(a)
    return _node(a.value * a.value, ((a, 2.0 * a.value),), "square")


def log(a) -> Node:
    a = lift(a)
    if np.any(np.asarray(a.value) <= 0.0):
        raise DomainError(f"log: argument must be positive, got {a.value!r}")
    if isinstance(a.value, float):
        return _node(math.log(a.value), ((a, 1.0 / a.value),), "log")
    return _node(np.log(a.value), ((a, 1.0 / a.value),), "log")


def exp(a) -> Node:
    a = lift(a)
    if isinstance(a.value, float):
        try:
            out = math.exp(a.value)
        except OverflowError:
            raise DomainError(f"exp: overflow at {a.value!r}") from None
    else:
        out = np.exp(a.value)
    return _node(out, ((a, out),), "exp")


def _sigmoid(x: Value) -> Value:
    if not isinstance(x, float):
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))[()]
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sigmoid(a) -> Node:
    a = lift(a)
    s = _sigmoid(a.value)
    return _node(s, ((a, s * (1.0 - s)),), "sigmoid")


def log_sigmoid(a) -> Node:
    """log(sigmoid(a)) without underflow for large negative inputs."""
    a = lift(a)
    x = a.value
    if isinstance(x, float):
        out = min(x, 0.0) - math.log1p(math.exp(-abs(x)))
    else:
        out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _node(out, ((a, _sigmoid(-x)),), "log_sigmoid")


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; derivative 1 inside the interval, 0 outside."""
    a = lift(a)
    if lo > hi:
        raise ValueError(f"clip: lo={lo} > hi={hi}")
    x = a.value
    if isinstance(x, np.ndarray):
        out = np.clip(x, lo, hi)
        local = ((x >= lo) & (x <= hi)).astype(float)
    else:
        out = min(max(x, lo), hi)
        local = 1.0 if lo <= x <= hi else 0.0
    return _node(out, ((a, local),), "clip")


def minimum(a, b) -> Node:
    """Elementwise min of two scalars; ties route the gradient to ``a``."""
    a, b = lift(a), lift(b)
    if a.shape or b.shape:
        raise ValueError("minimum: scalar operands only")
    if a.value <= b.value:
        return _node(a.value, ((a, 1.0), (b, 0.0)), "minimum")
    return _node(b.value, ((a, 0.0), (b, 1.0)), "minimum")


def logsumexp(xs) -> Node:
    """log(sum(exp(x))) over a vector node or a list of scalar nodes."""
    if isinstance(xs, Node):
        if not xs.shape:
            raise ValueError("logsumexp: expected a vector node")
        x = xs.value
        m = x.max()
        shifted = np.exp(x - m)
        total = shifted.sum()
        return _node(m + np.log(total), ((xs, shifted / total),), "logsumexp")
    nodes = [lift(x) for x in xs]
    if not nodes:
        raise ValueError("logsumexp: empty input")
    vals = np.array([n.value for n in nodes])
    m = vals.max()
    shifted = np.exp(vals - m)
    total = shifted.sum()
    parents = tuple((n, s / total) for n, s in zip(nodes, shifted))
    return _node(m + np.log(total), parents, "logsumexp")


def add_n(xs: Sequence) -> Node:
    """Sum of many scalar nodes as a single node."""
    nodes = [lift(x) for x in xs]
    if not nodes:
        return make_const(0.0)
    vals = [n.value for n in nodes]
    total = math.fsum(vals) if all(isinstance(v, float) for v in vals) else sum(vals[1:], vals[0])
    return _node(total, tuple((n, 1.0) for n in nodes), "add_n")


def mean(xs: Sequence) -> Node:
    nodes = [lift(x) for x in xs]
    if not nodes:
        raise ValueError("mean: empty input")
    return add_n(nodes) / float(len(nodes))


def vsum(a: Node) -> Node:
    """Sum of a vector node's entries."""
    if not a.shape:
        raise ValueError("vsum: expected a vector node")
    return _node(a.value.sum(), ((a, np.ones_like(a.value)),), "vsum")


def index(a: Node, i: int) -> Node:
    """The i-th entry of a vector node."""
    if not a.shape:
        raise ValueError("index: expected a vector node")
    onehot = np.zeros_like(a.value)
    onehot[i] = 1.0
    return _node(a.value[i], ((a, onehot),), "index")


def stack(xs: Sequence) -> Node:
    """Build a vector node from scalar nodes."""
    nodes = [lift(x) for x in xs]
    k = len(nodes)
    parents = []
    for i, n in enumerate(nodes):
        onehot = np.zeros(k)
        onehot[i] = 1.0
        parents.append((n, onehot))
    return _node(np.array([n.value for n in nodes]), tuple(parents), "stack")


# --- backward ------------------------------------------------------------------


def _reachable(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    todo = [root]
    while todo:
        n = todo.pop()
        if n.id in seen:
            continue
        seen[n.id] = n
        for p, _ in n.parents:
            if p.id not in seen:
                todo.append(p)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(root: Node, params: Sequence[Node] = ()) -> GradientMap:
    """Gradients of a scalar ``root`` with respect to every reachable parameter.

    Parameters listed in ``params`` but not reachable from ``root`` map to 0.
    """
    if root.shape:
        raise ValueError("backward: root must be a scalar node")
    grads: dict[int, Value] = {root.id: 1.0}
    out: GradientMap = {}
    for node in _reachable(root):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_param:
            out[node.id] = g
        for parent, local in node.parents:
            contrib = g * local
            if isinstance(contrib, np.ndarray) and not isinstance(parent.value, np.ndarray):
                contrib = float(np.sum(contrib))
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + contrib
            else:
                grads[parent.id] = contrib
    for p in params:
        if p.id not in out:
            out[p.id] = np.zeros_like(p.value) if p.shape else 0.0
    return out


# --- finite differences ----------------------------------------------------------


def finite_diff_check(
    loss_builder: Callable[[list[Node]], Node],
    params: Sequence,
    h: float = 1e-5,
) -> float:
    """Largest relative error between backward() and central differences.

    ``params`` is a list of scalars and/or 1-D arrays; ``loss_builder`` receives
    one node per entry (parameters for the analytic pass, constants for the
    perturbed passes) and must return a scalar node.  The relative error of a
    component is ``|a - n| / max(|a|, |n|, 1e-8)``.

    The analytic pass runs in float64.  The perturbed passes run in
    ``np.longdouble``: with h = 1e-5 the float64 rounding noise of the
    difference quotient is ~1e-11, which is larger than the 1e-8 floor times a
    1e-4 tolerance on components whose gradient cancels to exactly zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = [_as_value(p) for p in params]
    nodes = [make_param(p) for p in base]
    grads = backward(loss_builder(nodes), nodes)
    wide = [np.asarray(p, dtype=np.longdouble) for p in base]

    def f(values) -> np.longdouble:
        return loss_builder([make_const(v if v.ndim else v[()]) for v in values]).value

    worst = 0.0
    for i, p in enumerate(wide):
        analytic = np.atleast_1d(grads[nodes[i].id])
        for j in range(p.size):
            up, down = p.copy(), p.copy()
            up.flat[j] += h
            down.flat[j] -= h
            plus, minus = list(wide), list(wide)
            plus[i], minus[i] = up, down
            numeric = float((f(plus) - f(minus)) / (2 * np.longdouble(h)))
            a = float(analytic[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
