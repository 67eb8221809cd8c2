"""Reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tensor`` wraps an ndarray and, while gradient recording is enabled,
remembers the operation that produced it.  Calling :meth:`Tensor.backward`
on a scalar (or with an explicit output adjoint) walks the recorded graph
in reverse topological order and accumulates adjoints into ``.grad`` of
every tensor created with ``requires_grad=True``.

Scope is deliberately small: dense 2-D/1-D arrays, the op set needed for
MLPs and transport losses, first-order derivatives only.  Gradients with
respect to *inputs* of scalar-valued networks are supported (they are just
leaves with ``requires_grad=True``); higher-order derivatives are not.
"""

from __future__ import annotations

import numpy as np

from ..errors import GraphStateError, NumericalError, ShapeMismatchError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (e.g. for evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # Sum over leading axes numpy added.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # Sum over axes that were broadcast from size 1.
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the autodiff graph.

    Leaf tensors are validated to be finite; NaN or Inf in externally
    supplied data is rejected immediately rather than surfacing later as a
    mysterious diverged loss.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(),
                 _backward=None, op: str = "leaf"):
        self.data = _as_array(data)
        if op == "leaf" and not np.all(np.isfinite(self.data)):
            raise NumericalError("non-finite value in leaf tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph mechanics ------------------------------------------------------

    def backward(self, output_adjoint=None) -> None:
        """Accumulate adjoints of this value into the graph's leaves.

        ``output_adjoint`` defaults to 1 for scalars; non-scalar outputs
        must supply an adjoint of matching shape.
        """
        if self._backward is None and not self.requires_grad:
            raise GraphStateError(
                "backward called on a tensor with no recorded forward graph")
        if output_adjoint is None:
            if self.data.size != 1:
                raise ShapeMismatchError(
                    "backward on non-scalar output requires an explicit adjoint")
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(output_adjoint)
            if seed.shape != self.data.shape:
                raise ShapeMismatchError(
                    f"adjoint shape {seed.shape} does not match output {self.data.shape}")

        order = _topo_order(self)
        adjoints: dict[int, np.ndarray] = {id(self): seed}
        for node in order:
            adj = adjoints.pop(id(node), None)
            if adj is None:
                continue
            if node.requires_grad:
                node.grad = adj if node.grad is None else node.grad + adj
            if node._backward is None:
                continue
            for parent, contrib in zip(node._parents, node._backward(adj)):
                if contrib is None:
                    continue
                pid = id(parent)
                if pid in adjoints:
                    adjoints[pid] = adjoints[pid] + contrib
                else:
                    adjoints[pid] = contrib

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_const(other, -1.0))
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the graph below ``root`` (iterative)."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    """Create a result tensor, recording the graph edge only when needed."""
    track = _grad_enabled and any(
        p.requires_grad or p._backward is not None for p in parents)
    if track:
        return Tensor(data, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


# -- primitive operations -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"add: {a.shape} + {b.shape}") from exc

    def backward(adj):
        return (_unbroadcast(adj, a.data.shape), _unbroadcast(adj, b.data.shape))

    return _record(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"mul: {a.shape} * {b.shape}") from exc

    def backward(adj):
        return (_unbroadcast(adj * b.data, a.data.shape),
                _unbroadcast(adj * a.data, b.data.shape))

    return _record(out, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(adj):
        return (adj @ b.data.T, a.data.T @ adj)

    return _record(out, (a, b), backward, "matmul")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)

    def backward(adj):
        return (adj * mask,)

    return _record(out, (a,), backward, "relu")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def backward(adj):
        return (adj * (1.0 - out * out),)

    return _record(out, (a,), backward, "tanh")


def square(a) -> Tensor:
    a = _wrap(a)
    out = a.data * a.data

    def backward(adj):
        return (adj * (2.0 * a.data),)

    return _record(out, (a,), backward, "square")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def backward(adj):
        return (adj * (0.5 / out),)

    return _record(out, (a,), backward, "sqrt")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def backward(adj):
        return (adj * out,)

    return _record(out, (a,), backward, "exp")


def pow_const(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _wrap(a)
    p = float(p)
    out = a.data ** p

    def backward(adj):
        return (adj * (p * a.data ** (p - 1.0)),)

    return _record(out, (a,), backward, "pow")


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(adj):
        adj = np.asarray(adj)
        if axis is not None and not keepdims:
            adj = np.expand_dims(adj, axis)
        return (np.broadcast_to(adj, a.data.shape).copy(),)

    return _record(out, (a,), backward, "sum")


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(adj):
        adj = np.asarray(adj) / count
        if axis is not None and not keepdims:
            adj = np.expand_dims(adj, axis)
        return (np.broadcast_to(adj, a.data.shape).copy(),)

    return _record(out, (a,), backward, "mean")


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate 2-D tensors along ``axis`` (backward splits the adjoint)."""
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(adj):
        return tuple(np.split(adj, splits, axis=axis))

    return _record(out, tuple(tensors), backward, "concat")
