"""Dense tensors with a recording tape for reverse-mode differentiation.

Every differentiable primitive records one node on the active :class:`Tape`
when at least one operand requires a gradient. :func:`backward` walks the tape
in reverse and accumulates gradients into the operands.

Broadcasting is restricted to scalar-vs-tensor and equal shapes. Row-vector
bias addition goes through the explicit :func:`bias_add` primitive.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

SIGMOID_EPS = 1e-7
DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """n-dimensional float array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype or _infer_dtype(data))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    if isinstance(data, Tensor):
        return data.data.dtype
    return DEFAULT_DTYPE


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications (operands precede results)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_tape():
    """Temporarily suspend recording (inference)."""
    saved = _TAPE_STACK[:]
    _TAPE_STACK.clear()
    try:
        yield
    finally:
        _TAPE_STACK.extend(saved)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if needs and tape is not None:
        out.requires_grad = True
        node = _Node(out, inputs, backward_fn)
        out._node = node
        tape.record(node)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def _scalar_view(t: Tensor):
    return t.data.reshape(()) if _is_scalar(t) else t.data


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = _as_tensor(a, b)
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "add")
    out = _scalar_view(a) + _scalar_view(b)

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _result(np.asarray(out).reshape(_out_shape(a, b)), (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "sub")
    out = _scalar_view(a) - _scalar_view(b)

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _result(np.asarray(out).reshape(_out_shape(a, b)), (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "mul")
    av, bv = _scalar_view(a), _scalar_view(b)
    out = av * bv

    def bw(g):
        return _unbroadcast(g * bv, a), _unbroadcast(g * av, b)

    return _result(np.asarray(out).reshape(_out_shape(a, b)), (a, b), bw)


def _out_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    return b.shape if _is_scalar(a) else a.shape


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def bw(g):
        return (g * mask,)

    return _result(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function clamped to [1e-7, 1 - 1e-7]."""
    raw = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = np.clip(raw, SIGMOID_EPS, 1.0 - SIGMOID_EPS).astype(x.data.dtype)
    inside = (raw > SIGMOID_EPS) & (raw < 1.0 - SIGMOID_EPS)

    def bw(g):
        return (g * out * (1.0 - out) * inside,)

    return _result(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _result(out, (x,), bw)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def bw(g):
        return (2.0 * g * x.data,)

    return _result(out, (x,), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- reductions


def _check_axis(t: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not -t.data.ndim <= axis < t.data.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {t.data.ndim}")


def sum(t: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    _check_axis(t, axis)
    if axis is None:
        out = np.asarray([t.data.sum(dtype=np.float64)], dtype=t.data.dtype)
    else:
        out = t.data.sum(axis=axis, dtype=np.float64).astype(t.data.dtype)

    def bw(g):
        if axis is None:
            return (np.full(t.shape, g.reshape(()), dtype=t.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), t.shape).astype(t.data.dtype),)

    return _result(out, (t,), bw)


def mean(t: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(t, axis)
    n = t.data.size if axis is None else t.data.shape[axis]
    if axis is None:
        out = np.asarray([t.data.mean(dtype=np.float64)], dtype=t.data.dtype)
    else:
        out = t.data.mean(axis=axis, dtype=np.float64).astype(t.data.dtype)

    def bw(g):
        if axis is None:
            return (np.full(t.shape, g.reshape(()) / n, dtype=t.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, t.shape).astype(t.data.dtype),)

    return _result(out, (t,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a row vector ``b`` (shape [D]) to every row of ``x`` (shape [B, D])."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"bias_add: {x.shape} vs {b.shape}")
    out = x.data + b.data

    def bw(g):
        return g, g.sum(axis=0)

    return _result(out, (x, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("transpose needs a matrix")
    out = np.ascontiguousarray(x.data.T)

    def bw(g):
        return (g.T,)

    return _result(out, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tuple(tensors), bw)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis, max-subtracted."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), bw)


def pick(x: Tensor, index: Sequence[int]) -> Tensor:
    """Select ``x[i, index[i]]`` for every row; returns shape [B]."""
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick: {x.shape} with {idx.shape} indices")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise ContractError("pick: index out of range")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _result(out, (x,), bw)


def normalize_columns(x: Tensor) -> Tensor:
    """Scale each column of a matrix to unit Euclidean norm."""
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=0)).astype(x.data.dtype)
    if np.any(norms == 0):
        raise ZeroDivisionError("normalize_columns: zero-norm column")
    out = x.data / norms

    def bw(g):
        proj = (g * out).sum(axis=0)
        return ((g - out * proj) / norms,)

    return _result(out, (x,), bw)


def straight_through(z: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value``; backward copies the incoming gradient into ``z``."""
    value = np.asarray(value, dtype=z.data.dtype)
    if value.shape != z.shape:
        raise DimensionError(f"straight_through: {z.shape} vs {value.shape}")

    def bw(g):
        return (g,)

    return _result(value.copy(), (z,), bw)


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


# ---------------------------------------------------------------- backward


def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``root``.

    Gradients of leaf tensors accumulate across calls; intermediate results
    are recomputed from scratch on each pass.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    results = {id(n.out) for n in tape.nodes}
    if root._node is None or id(root) not in results:
        raise ContractError("backward root was not produced on this tape")
    for node in tape.nodes:
        node.out.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if not inp.requires_grad or gi is None:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
            if inp.grad is None:
                inp.grad = gi.copy()
            else:
                inp.grad = inp.grad + gi

