"""Small reverse-mode autodiff over float64 numpy arrays.

Each op builds its output eagerly and remembers its parents plus a closure
that maps the output gradient to parent gradients.  ``backward`` linearises
the graph into a :class:`Tape` (parents always before children) and walks it
in reverse.  There is no global state, so independent graphs can live on
independent threads.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from moenc.errors import ContractError, DimensionError

LOG_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; use scale()")
        return scale(self, 1.0 / float(other))

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``max(x, eps)``; the gradient is zero where the guard is active."""
    guarded = np.maximum(x.data, eps)
    live = x.data >= eps
    return _result(np.log(guarded), (x,), lambda g: (np.where(live, g / guarded, 0.0),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# -- linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis} with shapes {shapes}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(data, tensors, backward_fn)


# -- reductions --------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _result(
        np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
        lambda g: (_expand(g, x.shape, axis, keepdims).copy(),),
    )


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return _result(
        np.mean(x.data, axis=axis, keepdims=keepdims), (x,),
        lambda g: (_expand(g, x.shape, axis, keepdims) / n,),
    )


def max_with_index(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` and the argmax (lowest index on ties).

    The selection mask is constant for differentiation: gradient reaches only
    the selected entries, never the choice itself.
    """
    idx = np.argmax(x.data, axis=axis)
    picked = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(np.squeeze(picked, axis=axis), (x,), backward_fn), idx


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def backward_fn(g):
        return (g - y * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), backward_fn)


# -- gradient plumbing -------------------------------------------------------

def stop_gradient(x: Tensor) -> Tensor:
    """Same value as ``x``; contributes no gradient to it."""
    return Tensor(x.data.copy())


def straight_through(forward: Tensor, surrogate: Tensor) -> Tensor:
    """Value of ``forward``, gradient of ``surrogate``.

    Equivalent to ``surrogate - stop_gradient(surrogate - forward)`` but the
    forward value is returned bit for bit instead of after two roundings.
    """
    if forward.shape != surrogate.shape:
        raise DimensionError(
            f"straight_through shapes differ: {forward.shape} vs {surrogate.shape}"
        )
    return _result(forward.data.copy(), (surrogate,), lambda g: (g,))


class Tape:
    """Nodes reachable from a root, ordered so producers precede consumers."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(order)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``root`` depends on through grad-tracking ops."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- finite differences ------------------------------------------------------

def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = np.linalg.norm(a - b)
    return float(diff) if denom < 1e-10 else float(diff / denom)


def finite_diff_check(
    f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` rebuilds the scalar graph from the current values of ``inputs``.
    """
    for t in inputs:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_grad(lambda: float(f().data), t.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
