"""Small reverse-mode autodiff over dense float64 arrays, plus ADAM.

Every differentiable computation in the package is expressed in nine
primitives: add, multiply, matmul, masked_matmul, tanh, exp, log, sum and
broadcast. Elementwise primitives require identical shapes; shape expansion
is always an explicit ``broadcast``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PRIMITIVES = (
    "add",
    "multiply",
    "matmul",
    "masked_matmul",
    "tanh",
    "exp",
    "log",
    "sum",
    "broadcast",
)

_grad_enabled = True


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"non-finite gradient in parameter block {block!r}")


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array that doubles as a node of the autodiff tape.

    Leaves created with ``requires_grad=True`` are parameters; results of
    primitives record their parents and a vector-Jacobian closure.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name or ''} has non-finite entries")
        self.data = arr
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    @classmethod
    def _result(cls, data, op, parents, vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.op = op if track else None
        out.parents = tuple(parents) if track else ()
        out._vjp = vjp if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    # sugar over the primitives
    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, _lift(other, self.shape))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return add(self, -_lift(other, self.shape))

    def __rsub__(self, other):
        return add(_lift(other, self.shape), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        if x.shape != shape and x.data.size == 1:
            return broadcast(x, shape)
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        arr = np.broadcast_to(arr, shape)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---- primitives -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return Tensor._result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("multiply", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, "multiply", (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def masked_matmul(a: Tensor, w: Tensor, mask: np.ndarray) -> Tensor:
    """``a @ (w * mask)`` with a constant 0/1 mask; masked weights get zero gradient."""
    mask = np.asarray(mask, dtype=np.float64)
    if a.data.ndim != 2 or w.data.ndim != 2 or a.shape[1] != w.shape[0]:
        raise ShapeError("masked_matmul", a.shape, w.shape)
    if mask.shape != w.shape:
        raise ShapeError("masked_matmul", w.shape, mask.shape)
    ad = a.data
    wm = w.data * mask
    return Tensor._result(
        ad @ wm, "masked_matmul", (a, w), lambda g: (g @ wm.T, (ad.T @ g) * mask)
    )


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input")
    ad = a.data
    return Tensor._result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Sum over one axis (dropped), or over everything to a shape-(1,) scalar."""
    shape = a.shape
    if axis is None:
        out = np.array([a.data.sum()])
        return Tensor._result(out, "sum", (a,), lambda g: (np.full(shape, g[0]),))
    if not -len(shape) <= axis < len(shape):
        raise ShapeError("sum", shape)
    out = a.data.sum(axis=axis)
    return Tensor._result(
        out, "sum", (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    )


def broadcast(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand ``a`` to ``shape`` under numpy rules; the gradient sums back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    src = a.shape
    return Tensor._result(out, "broadcast", (a,), lambda g: (_unbroadcast(g, src),))


# ---- composites -------------------------------------------------------------


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return sum(a, axis) * (1.0 / n)


def square(a: Tensor) -> Tensor:
    return multiply(a, a)


# ---- reverse pass -----------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``root`` with respect to each of ``leaves``.

    Leaves that do not feed into ``root`` get an all-zero gradient.
    """
    if root.data.size != 1:
        raise ShapeError("backward", root.shape)
    leaves = list(leaves)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    if root.requires_grad:
        for node in reversed(_topological(root)):
            g = grads.pop(id(node), None) if node._vjp is not None else grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return [np.array(grads.get(id(leaf), np.zeros_like(leaf.data)), dtype=np.float64)
            for leaf in leaves]


# ---- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
) -> None:
    """One bias-corrected ADAM update in the ascent direction, in place."""
    if len(state.m) != len(params):
        raise ShapeError("adam_step", (len(params),), (len(state.m),))
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(p.name or f"param[{i}]")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data + state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
