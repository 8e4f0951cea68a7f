"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations the traffic model and the mask
search need (batched matrix products, row softmax, elementwise arithmetic,
reductions). Values are numpy float64 arrays; calling ``backward()`` on a
scalar output accumulates derivatives into the ``grad`` field of every
leaf tensor created with ``requires_grad=True``.

Broadcasting follows numpy: a size-1 axis stretches, missing leading axes
are added. The reverse pass sums gradients back over broadcast axes.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode AD.

    ``_parents`` and ``_vjp`` record the operation that produced this
    tensor; they are only set when some input requires gradients, so
    pure-inference forwards build no graph at all.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # ---- construction ------------------------------------------------

    @classmethod
    def from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        """Build an op-output node. ``vjp(g)`` must return one gradient
        array (or None) per parent, already reduced to the parent shape."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    # ---- inspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() expects a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # ---- gradient plumbing ---------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return not self._parents

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        Repeated calls without ``zero_grad`` keep accumulating, so two
        backward passes double the stored gradients.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() expects a scalar output, got shape {self.data.shape}")
        Tape.record(self).run()

    # ---- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __mul__(self, other):
        return hadamard(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """The reverse-pass schedule for one scalar output.

    Holds every node reachable from the output, in topological order;
    ``run()`` replays them once in reverse, pushing vector-Jacobian
    products from the output back to the leaves.
    """

    def __init__(self, root: Tensor, nodes: list[Tensor]):
        self.root = root
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order so deep graphs don't hit the recursion limit
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(root, order)

    def run(self) -> None:
        adjoint: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node.is_leaf():
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = adjoint.get(id(parent))
                # never accumulate in place: vjps may hand the same array
                # (or a view of it) to several parents
                adjoint[id(parent)] = pg if acc is None else acc + pg


# ---- core operations ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return Tensor.from_op(data, (a, b), vjp)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "subtract")
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "hadamard")
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def negate(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def scalar_scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor.from_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax_rows(t: Tensor, keep: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis, with max-subtraction for stability.

    ``keep`` is an optional boolean array (broadcastable to ``t.shape``)
    marking the entries that participate; dropped entries get probability
    zero. A row with no kept entries comes out all-zero rather than NaN,
    which is the convention for attention rows without neighbors.
    """
    x = t.data
    if keep is None:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        p = e / e.sum(axis=-1, keepdims=True)
    else:
        keep_b = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
        gated = np.where(keep_b, x, -np.inf)
        m = gated.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(keep_b, np.exp(x - m), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def vjp(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(p, (t,), vjp)


def tensor_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, t.shape).copy(),)

    return Tensor.from_op(data, (t,), vjp)


def tensor_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = t.size if axis is None else t.shape[axis]
    return scalar_scale(tensor_sum(t, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(t: Tensor, shape) -> Tensor:
    return Tensor.from_op(t.data.reshape(shape), (t,), lambda g: (g.reshape(t.shape),))


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(t.data.transpose(axes), (t,), lambda g: (g.transpose(inverse),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    d = subtract(a, b)
    return tensor_mean(hadamard(d, d))


_ELEMENTWISE = {
    "add": add,
    "subtract": subtract,
    "hadamard": hadamard,
    "sigmoid": lambda a, b=None: sigmoid(a),
    "relu": lambda a, b=None: relu(a),
    "negate": lambda a, b=None: negate(a),
    "scalar-scale": scalar_scale,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by op-kind name; binary kinds require ``b``."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("add", "subtract", "hadamard", "scalar-scale"):
        if b is None:
            raise ValueError(f"elementwise {kind!r} needs a second operand")
        return fn(a, b)
    return fn(a)
