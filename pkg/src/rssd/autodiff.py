"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps an immutable numpy array. Operations on tensors build a
computation graph lazily: each result remembers its parents and a
vector-Jacobian product closure. ``backward`` walks the graph once in reverse
topological order and returns the adjoint of every reachable node;
``GradTape`` restricts that to a named parameter set and guarantees a
shape-matched adjoint for every parameter, used or not.

Everything is 64-bit. The finite-difference oracle in ``linalg`` checks the
gradients of every operation here at 1e-4 relative error, which float32 cannot
reach. Non-finite values are rejected at construction time, so an overflow
inside a long training step surfaces at the op that produced it instead of as
a NaN loss ten calls later.

No broadcasting rule is invented: forward values follow numpy broadcasting and
the backward pass sums adjoints over the broadcast axes.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray


def _validated(data, op: str) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by '{op}'")
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum an adjoint over the axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Immutable float64 array, optionally participating in a gradient graph.

    The underlying buffer is marked read-only; sharing tensors across threads
    is safe. ``requires_grad`` propagates through operations, and nodes built
    from constants carry no graph at all.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    # numpy must defer binary ops to our reflected methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = _validated(data, "Tensor").copy()
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple] | None = None

    @classmethod
    def _node(cls, data: Array, op: str, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = cls.__new__(cls)
        arr = _validated(data, op)
        if arr.base is not None or arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        out.data = arr
        tracked = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(tracked)
        out._parents = parents if out.requires_grad else ()
        out._vjp = vjp if out.requires_grad else None
        return out

    # ---- basic protocol ----

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
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        return out

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ---- arithmetic ----

    def __add__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._node(
            a.data + b.data,
            "add",
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._node(-self.data, "neg", (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._node(
            a.data * b.data,
            "mul",
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        b = as_tensor(other)
        return self * b ** (-1.0)

    def __rtruediv__(self, other):
        return as_tensor(other) * self ** (-1.0)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ShapeError("only scalar exponents are supported")
        p = float(exponent)
        a = self
        out_data = a.data**p

        def vjp(g):
            return (g * p * a.data ** (p - 1.0),)

        return Tensor._node(out_data, f"pow{p}", (a,), vjp)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    # ---- shape ops ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, axes: tuple[int, ...]):
        a = self
        inv = tuple(int(i) for i in np.argsort(axes))
        return Tensor._node(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))

    def take(self, indices) -> "Tensor":
        """Rows along axis 0; backward scatter-adds into the source."""
        a = self
        idx = np.asarray(indices, dtype=np.int64)

        def vjp(g):
            full = np.zeros(a.shape, dtype=np.float64)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._node(a.data[idx], "take", (a,), vjp)

    def __getitem__(self, key):
        if isinstance(key, slice):
            key = np.arange(*key.indices(self.shape[0]))
        return self.take(key)

    # ---- reductions ----

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[i] for i in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """Alias for wrapping plain data without gradient tracking."""
    return as_tensor(value)


# ---- free functions ----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product where the right operand is 2-D; the left may be batched."""
    if b.ndim != 2:
        raise ShapeError(f"matmul right operand must be 2-D, got {b.shape}")
    if a.ndim < 2:
        raise ShapeError(f"matmul left operand must be at least 2-D, got {a.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ b.data.T
        k, m = b.shape
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return (ga, gb)

    return Tensor._node(a.data @ b.data, "matmul", (a, b), vjp)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)
    return Tensor._node(out_data, "exp", (x,), lambda g: (g * out_data,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)
    return Tensor._node(out_data, "tanh", (x,), lambda g: (g * (1.0 - out_data**2),))


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(np.abs(x.data), "abs", (x,), lambda g: (g * np.sign(x.data),))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(out: Tensor) -> dict[int, Array]:
    """Adjoints of a scalar output w.r.t. every reachable graph node, keyed by id."""
    if out.size != 1:
        raise ShapeError(f"backward requires a scalar output, got shape {out.shape}")
    adjoint: dict[int, Array] = {id(out): np.ones(out.shape, dtype=np.float64)}
    for node in reversed(_topo_order(out)):
        grad = adjoint.get(id(node))
        if grad is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(grad)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg
    return adjoint


class GradTape:
    """Named parameter set plus the adjoints a backward pass assigns to it.

    Parameters are promoted to ``requires_grad`` tensors on entry. After
    ``gradients`` every parameter has an adjoint of exactly its own shape;
    parameters the loss never touched get zeros, which keeps optimizer code
    free of special cases.
    """

    def __init__(self, params: dict[str, Tensor] | Iterable[tuple[str, Tensor]]):
        items = params.items() if isinstance(params, dict) else params
        self.params: dict[str, Tensor] = {}
        for name, p in items:
            t = p if isinstance(p, Tensor) else Tensor(p)
            if not t.requires_grad:
                t = Tensor(t.data, requires_grad=True)
            self.params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def gradients(self, loss: Tensor) -> dict[str, Array]:
        adjoint = backward(loss)
        out: dict[str, Array] = {}
        for name, p in self.params.items():
            g = adjoint.get(id(p))
            out[name] = np.zeros(p.shape, dtype=np.float64) if g is None else np.asarray(g)
        return out
