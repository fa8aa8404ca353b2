"""Dense float64 tensors and a define-by-run graph with reverse-mode gradients.

Values are plain ``numpy.ndarray`` objects in float64.  A :class:`Node` wraps a
value together with the op that produced it, so a forward pass records the
graph and :func:`backward` walks it in reverse.  Binary ops never broadcast
implicitly; the only exception is a scalar combined with a tensor.  Explicit
broadcasting goes through :func:`broadcast_to` or :func:`add_bias`.
"""

from __future__ import annotations

import numbers
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.01


class GraphError(Exception):
    """Base class for errors raised by graph ops."""


class ShapeError(GraphError, ValueError):
    pass


class DomainError(GraphError, ValueError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    pass


def as_array(data) -> np.ndarray:
    """Coerce ``data`` to a contiguous float64 array with positive extents."""
    arr = np.asarray(data, dtype=DTYPE)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if any(n <= 0 for n in arr.shape):
        raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
    return arr


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A value in the computation graph.

    Leaves are created with :func:`parameter` (trainable, gradients wanted)
    or :func:`constant`.  Interior nodes come from ops and remember their
    parents plus a closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("value", "grad", "op", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple[Node, ...] = (),
        op: str = "leaf",
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

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
        if not isinstance(other, numbers.Real):
            raise TypeError("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: Optional[str] = None) -> Node:
    value = as_array(data)
    _check_finite("parameter", value)
    return Node(value, requires_grad=True, name=name)


def constant(data, name: Optional[str] = None) -> Node:
    value = as_array(data)
    _check_finite("constant", value)
    return Node(value, name=name)


def lift(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")


def make_node(op: str, value: np.ndarray, parents: Sequence[Node], backward_fn: BackwardFn) -> Node:
    """Register an op result on the graph.

    ``backward_fn`` receives the gradient w.r.t. the output and returns one
    gradient (or ``None``) per parent.  Extension ops in other modules use
    this to plug custom rules into the same engine.
    """
    _check_finite(op, value)
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, parents, op, backward_fn, requires_grad=True)
    return Node(value, op=op)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_operands(op: str, a, b) -> tuple[Node, Node]:
    a, b = lift(a), lift(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Node:
    a, b = _binary_operands("add", a, b)

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_node("add", a.value + b.value, (a, b), backward_fn)


def sub(a, b) -> Node:
    a, b = _binary_operands("sub", a, b)

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return make_node("sub", a.value - b.value, (a, b), backward_fn)


def mul(a, b) -> Node:
    a, b = _binary_operands("mul", a, b)

    def backward_fn(g):
        ga = _reduce_to(g * b.value, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node("mul", a.value * b.value, (a, b), backward_fn)


def exp(a) -> Node:
    a = lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return make_node("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = lift(a)
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive input")
    return make_node("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Node:
    a = lift(a)
    if np.any(a.value <= 0):
        raise DomainError("sqrt of non-positive input")
    out = np.sqrt(a.value)
    return make_node("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Node:
    a = lift(a)
    return make_node("square", a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def tanh(a) -> Node:
    a = lift(a)
    out = np.tanh(a.value)
    return make_node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Node:
    a = lift(a)
    # tanh form cannot overflow
    out = 0.5 + 0.5 * np.tanh(0.5 * a.value)
    return make_node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Node:
    a = lift(a)
    mask = a.value > 0
    return make_node("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Node:
    a = lift(a)
    scale = np.where(a.value > 0, 1.0, slope)
    return make_node("leaky_relu", a.value * scale, (a,), lambda g: (g * scale,))


def identity(a) -> Node:
    return lift(a)


ACTIVATIONS: dict[str, Callable[[Node], Node]] = {
    "linear": identity,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
}


def activation(kind: str) -> Callable[[Node], Node]:
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None


def elementwise(kind: str, *operands) -> Node:
    """Dispatch an elementwise op by name (``add``, ``sigmoid``, ...)."""
    ops = {
        "add": add, "sub": sub, "mul": mul, "exp": exp, "log": log, "tanh": tanh,
        "sigmoid": sigmoid, "relu": relu, "leaky_relu": leaky_relu,
        "square": square, "sqrt": sqrt,
    }
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](*operands)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward_fn(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return make_node("matmul", a.value @ b.value, (a, b), backward_fn)


def linear(x, w, b=None) -> Node:
    """``x @ w.T + b`` for ``x`` [B, F], ``w`` [H, F], ``b`` [H]."""
    x, w = lift(x), lift(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.value @ w.value.T
    parents = (x, w)
    if b is not None:
        b = lift(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out += b.value
        parents = (x, w, b)

    def backward_fn(g):
        gx = g @ w.value if x.requires_grad else None
        gw = g.T @ x.value if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return make_node("linear", out, parents, backward_fn)


def transpose(a) -> Node:
    a = lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return make_node("transpose", a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Node:
    a = lift(a)
    try:
        out = a.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_node("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape: Sequence[int]) -> Node:
    """Explicitly repeat ``a`` along new leading axes or size-1 axes."""
    a = lift(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} is not broadcastable to {shape}") from None
    lead = len(shape) - a.ndim
    keep = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def backward_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if keep:
            g = g.sum(axis=tuple(k - lead for k in keep), keepdims=True)
        return (g,)

    return make_node("broadcast_to", np.ascontiguousarray(out), (a,), backward_fn)


def add_bias(x, b) -> Node:
    """``x[..., j] + b[j]``: the one sanctioned row broadcast."""
    x, b = lift(x), lift(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing extent of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return make_node("add_bias", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))


def _axis(a: Node, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    axis %= a.ndim
    if a.shape[axis] == 0:
        raise ShapeError("cannot reduce over an empty axis")
    return axis


def slice_axis(a, axis: int, start: int, stop: int) -> Node:
    a = lift(a)
    axis = _axis(a, axis)
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return make_node("slice", np.ascontiguousarray(a.value[index]), (a,), backward_fn)


def select(a, axis: int, i: int) -> Node:
    """Pick index ``i`` along ``axis``, dropping that axis."""
    a = lift(a)
    axis = _axis(a, axis)
    part = slice_axis(a, axis, i, i + 1)
    return reshape(part, a.shape[:axis] + a.shape[axis + 1:])


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    parts = [lift(p) for p in parts]
    axis = _axis(parts[0], axis)
    out = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward_fn(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node("concat", out, parts, backward_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Node:  # noqa: A001
    a = lift(a)
    if axis is None:
        out = np.asarray(a.value.sum())
        if keepdims:
            out = out.reshape((1,) * a.ndim)
        return make_node("sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    axis = _axis(a, axis)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node("sum", out, (a,), backward_fn)


def mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    a = lift(a)
    count = a.value.size if axis is None else a.shape[_axis(a, axis)]
    return mul(sum(a, axis, keepdims), 1.0 / count)


def max(a, axis: Optional[int] = None, keepdims: bool = False) -> Node:  # noqa: A001
    """Maximum with a routing gradient to the lowest-index maximal element."""
    a = lift(a)
    if axis is None:
        flat = int(np.argmax(a.value))
        out = np.asarray(a.value.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * a.ndim)

        def backward_fn(g):
            full = np.zeros(a.value.size)
            full[flat] = np.asarray(g).reshape(-1)[0]
            return (full.reshape(a.shape),)

        return make_node("max", out, (a,), backward_fn)

    axis = _axis(a, axis)
    idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
    out = np.take_along_axis(a.value, idx, axis)
    if not keepdims:
        out = out.squeeze(axis)

    def backward_fn(g):
        g = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, g, axis)
        return (full,)

    return make_node("max", out, (a,), backward_fn)


def reduce(kind: str, a, axis: Optional[int] = None) -> Node:
    ops = {"sum": sum, "mean": mean, "max": max}
    if kind not in ops:
        raise ValueError(f"unknown reduction {kind!r}")
    return ops[kind](a, axis)


def logsumexp(a, axis: int = -1) -> Node:
    a = lift(a)
    axis = _axis(a, axis)
    shift = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - shift)
    total = e.sum(axis=axis, keepdims=True)
    out = (shift + np.log(total)).squeeze(axis)
    soft = e / total
    return make_node("logsumexp", out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def log_softmax(a, axis: int = -1) -> Node:
    a = lift(a)
    axis = _axis(a, axis)
    lse = logsumexp(a, axis)
    return sub(a, broadcast_to(reshape(lse, _keepdims_shape(a.shape, axis)), a.shape))


def softmax(a, axis: int = -1) -> Node:
    return exp(log_softmax(a, axis))


def _keepdims_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    return shape[:axis] + (1,) + shape[axis + 1:]


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def topological_order(root: Node) -> list[Node]:
    """Nodes reachable from ``root``, parents before children."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if id(p) not in seen)
    return order


def backward(loss: Node, params: Optional[Iterable[Node]] = None) -> dict[Node, np.ndarray]:
    """Propagate d(loss) back through the graph.

    Returns a map from parameter node to its gradient.  When ``params`` is
    given, every listed node gets an entry (zeros if the loss does not depend
    on it); otherwise all reachable trainable leaves are returned.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient propagated through {node.op}")
            parent.grad = g if parent.grad is None else parent.grad + g

    if params is None:
        params = [n for n in order if n.is_leaf and n.requires_grad]
    reachable = {id(n) for n in order}
    result = {}
    for p in params:
        # unreachable params may hold a stale gradient from an earlier pass
        if p.grad is None or id(p) not in reachable:
            p.grad = np.zeros_like(p.value)
        result[p] = p.grad
    return result
