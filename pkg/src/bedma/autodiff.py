"""Dense float64 tensors with reverse-mode differentiation over an explicit tape.

A :class:`Tape` records every operation whose inputs are attached to it, in
execution order.  :func:`backward` walks the tape in reverse and returns the
gradient of a scalar node with respect to every node on the tape.

Binary elementwise operations require equal shapes.  The only implicit
broadcast is against Python scalar constants; anything else goes through
:func:`broadcast_to` so the reduction in the backward pass is visible.
"""

from __future__ import annotations

from collections.abc import Mapping
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "DomainError",
    "Tensor",
    "Tape",
    "Gradients",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "shift",
    "sigmoid",
    "tanh",
    "relu",
    "log",
    "exp",
    "square",
    "sqrt",
    "softplus",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "softmax_rows",
    "concat",
    "concat_rows",
    "stack",
    "reshape",
    "broadcast_to",
    "pointwise",
    "custom_op",
    "LOCAL_DERIVATIVES",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input lies outside the domain of the operation (log or sqrt of a negative)."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, other)
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return shift(neg(self), other)
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


class Tape:
    """Ordered record of operations for one forward pass.

    Node ``i`` stores its operation kind, the node ids of its inputs and a
    closure mapping the output gradient to input gradients.  Leaves created
    with :meth:`variable` have no closure.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.shapes: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def variable(self, value) -> Tensor:
        """Attach ``value`` to the tape as a leaf."""
        data = np.array(value, dtype=np.float64)
        return self._push("leaf", (), data, None)

    def _push(self, kind, inputs, data, fn) -> Tensor:
        node = len(self.kinds)
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self.shapes.append(data.shape)
        self._backward.append(fn)
        return Tensor(data, self, node)


class Gradients(Mapping):
    """Node id to gradient; unreachable nodes read as zeros of their shape."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        node = key.node if isinstance(key, Tensor) else key
        if node is None or not 0 <= node < len(self._grads):
            raise KeyError(key)
        g = self._grads[node]
        if g is None:
            return np.zeros(self._tape.shapes[node])
        return g

    def __iter__(self) -> Iterator[int]:
        return iter(range(len(self._grads)))

    def __len__(self) -> int:
        return len(self._grads)

    def of(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape:
            raise KeyError("tensor is not recorded on this tape")
        return self[tensor.node]


def backward(tape: Tape, loss: Tensor) -> Gradients:
    if loss.tape is not tape:
        raise ValueError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list = [None] * len(tape)
    grads[loss.node] = np.ones(loss.shape)
    fns = tape._backward
    inputs = tape.inputs
    for node in range(loss.node, -1, -1):
        g = grads[node]
        if g is None or fns[node] is None:
            continue
        for parent, pg in zip(inputs[node], fns[node](g)):
            if pg is None or parent < 0:
                continue
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    return Gradients(tape, grads)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _record(kind, parents, data, fn) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    # untracked constants get id -1 and receive no gradient
    ids = tuple(-1 if p.tape is None else p.node for p in parents)
    return tape._push(kind, ids, data, fn)


def custom_op(kind: str, parents: Sequence[Tensor], value, backward_fn) -> Tensor:
    """Record an operation with a hand-written backward.

    ``backward_fn(g)`` returns one gradient (or None) per parent.
    """
    return _record(kind, tuple(as_tensor(p) for p in parents), np.asarray(value, dtype=np.float64), backward_fn)


def _same_shape(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out, lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("shift", (a,), a.data + float(c), lambda g: (g,))


_sigmoid = expit


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


# Local derivative d(out)/d(in) of each unary op, as a function of (input, output).
# Kept in a table so verification harnesses can swap one out.
LOCAL_DERIVATIVES: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "sigmoid": lambda x, y: y * (1.0 - y),
    "tanh": lambda x, y: 1.0 - y * y,
    "relu": lambda x, y: (x > 0).astype(np.float64),
    "log": lambda x, y: 1.0 / x,
    "exp": lambda x, y: y,
    "square": lambda x, y: 2.0 * x,
    "sqrt": lambda x, y: 0.5 / y,
    "softplus": lambda x, y: _sigmoid(x),
}

_UNARY_FORWARD: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sigmoid": _sigmoid,
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "log": np.log,
    "exp": np.exp,
    "square": np.square,
    "sqrt": np.sqrt,
    "softplus": _softplus,
}


_CHECKED_DOMAIN = frozenset({"log", "sqrt"})


def _unary(kind: str, a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if kind in _CHECKED_DOMAIN:
        if kind == "log" and np.any(x <= 0):
            raise DomainError("log of a non-positive value")
        if kind == "sqrt" and np.any(x < 0):
            raise DomainError("sqrt of a negative value")
    y = _UNARY_FORWARD[kind](x)
    if a.tape is None:
        return Tensor(y)

    def fn(g):
        return (g * LOCAL_DERIVATIVES[kind](x, y),)

    return _record(kind, (a,), y, fn)


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a)


def tanh(a) -> Tensor:
    return _unary("tanh", a)


def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    return _unary("relu", a)


def log(a) -> Tensor:
    return _unary("log", a)


def exp(a) -> Tensor:
    return _unary("exp", a)


def square(a) -> Tensor:
    return _unary("square", a)


def sqrt(a) -> Tensor:
    return _unary("sqrt", a)


def softplus(a) -> Tensor:
    """ln(1 + exp(x)), evaluated without overflow."""
    return _unary("softplus", a)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY_NAMES = tuple(_UNARY_FORWARD) + ("neg",)


def pointwise(kind: str, *operands, constant: float | None = None) -> Tensor:
    """Dispatch an elementwise operation by name.

    ``scale`` and ``shift`` take a single operand plus ``constant``.
    """
    if kind in _BINARY:
        return _BINARY[kind](*operands)
    if kind == "neg":
        return neg(*operands)
    if kind in _UNARY_FORWARD:
        return _unary(kind, *operands)
    if kind == "scale":
        return scale(operands[0], constant)
    if kind == "shift":
        return shift(operands[0], constant)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported forms: ``[m,k] @ [k,n]``; ``[...,m,k] @ [k,n]`` (one matrix
    applied to a stack); and ``[...,m,k] @ [...,k,n]`` with identical leading
    extents.
    """
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} vs {b.shape}")
    out = A @ B
    if a.tape is None and b.tape is None:
        return Tensor(out)

    if B.ndim == 2 and A.ndim > 2:
        k, n = B.shape

        def fn(g):
            ga = g @ B.T
            gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:

        def fn(g):
            return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return _record("matmul", (a, b), out, fn)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)
    return _record("transpose", (a,), out, lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        out = np.sum(a.data)
        return _record("sum", (a,), out, lambda g: (np.full(shape, g),))
    axis = axis % a.ndim
    out = np.sum(a.data, axis=axis)
    return _record(
        "sum", (a,), out, lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    )


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax_rows needs at least one axis")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record("softmax", (x,), y, fn)


# ----------------------------------------------------------- shape plumbing


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    nd = parts[0].ndim
    if nd == 0:
        raise ShapeError("cannot concatenate scalars")
    axis = axis % nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != nd or p.shape[:axis] + p.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat: incompatible extents {ref} and {p.shape} on axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = [0]
    for p in parts:
        bounds.append(bounds[-1] + p.shape[axis])
    lead = (slice(None),) * axis

    def fn(g):
        return tuple(g[lead + (slice(lo, hi),)] for lo, hi in zip(bounds, bounds[1:]))

    return _record("concat", tuple(parts), out, fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=0)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack of an empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise ShapeError(f"stack: shapes differ, {ref} vs {p.shape}")
    axis = axis % (len(ref) + 1)
    out = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record("stack", tuple(parts), out, fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums the copies."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} does not broadcast to {shape}") from exc
    old = a.shape
    lead = len(shape) - len(old)
    kept = tuple(i + lead for i, n in enumerate(old) if n == 1 and shape[i + lead] != 1)

    def fn(g):
        g = np.sum(g, axis=tuple(range(lead)) + kept, keepdims=True)
        return (g.reshape(old),)

    return _record("broadcast", (a,), out, fn)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("slice", (a,), np.array(out), fn)
