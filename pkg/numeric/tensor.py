"""
Dense tensors with reverse-mode gradients.

A Tensor wraps a read-only numpy array. Ops executed while a GradTape is
active are recorded whenever one of their operands is watched (it requires a
gradient or was itself produced by a recorded op); `backward` replays the
recorded adjoints in exact reverse execution order.

There is no implicit broadcasting: binary ops accept identical shapes, or a
scalar (shape ``()``) against anything. The one deliberate broadcast, copying
a vector onto every row, is the explicit `repeat_rows` op.
"""
from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, NumericError, UsageError

logger = logging.getLogger(__name__)

_PRECISIONS = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


def use_precision(name: str) -> None:
    """Set the dtype used for tensors created from Python data."""
    global _default_dtype
    if name not in _PRECISIONS:
        raise UsageError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _default_dtype = _PRECISIONS[name]


def default_dtype():
    return _default_dtype


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        # Always a copy, cast to the active precision unless a dtype is given.
        arr = np.array(data, dtype=dtype or _default_dtype)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Op outputs: the array is freshly computed, so no defensive copy.
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(shape: Sequence[int], dtype=None) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype or _default_dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

Adjoint = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    adjoint: Adjoint


_ACTIVE_TAPE: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar("prise_grad_tape", default=None)


class GradTape:
    """
    Ordered record of executed ops. Use as a context manager; one tape belongs
    to one training task at a time.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._watched: set = set()
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watches(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or id(tensor) in self._watched

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, adjoint: Adjoint) -> None:
        self.entries.append(TapeEntry(op, inputs, output, adjoint))
        self._watched.add(id(output))

    def __len__(self) -> int:
        return len(self.entries)


def _record(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, adjoint: Adjoint) -> Tensor:
    result = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(tape.watches(t) for t in inputs):
        tape.record(op, inputs, result, adjoint)
    return result


class Gradients:
    """Adjoints keyed by tensor identity; tensors that never reached the loss get zeros."""

    def __init__(self, adjoints: Dict[int, np.ndarray]):
        self._adjoints = adjoints

    def of(self, tensor: Tensor) -> np.ndarray:
        g = self._adjoints.get(id(tensor))
        if g is None:
            return np.zeros(tensor.shape, dtype=tensor.dtype)
        return g

    def for_params(self, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        return {name: self.of(p) for name, p in params.items()}


def backward(loss: Tensor, tape: Optional[GradTape] = None) -> Gradients:
    """Replay the tape's adjoints from a scalar loss."""
    tape = tape or _ACTIVE_TAPE.get()
    if tape is None:
        raise NumericError("backward() needs a GradTape")
    if loss.size != 1:
        raise DimensionError(f"backward() expects a scalar loss, got shape {loss.shape}")
    if not tape.watches(loss):
        return Gradients({})

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for entry in reversed(tape.entries):
        g = adjoints.get(id(entry.output))
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.adjoint(g)):
            if gi is None or not tape.watches(inp):
                continue
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gi
            else:
                adjoints[key] = gi
    return Gradients(adjoints)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; 1-D operands are treated as vectors (matrix-vector, vector-matrix, dot)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def adjoint(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return _record("matmul", (a, b), A @ B, adjoint)


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(x.shape)


_UNARY = ("relu", "sigmoid")
_BINARY = ("add", "mul", "sub")


def elementwise(kind: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    if kind in _UNARY:
        if b is not None:
            raise UsageError(f"elementwise {kind!r} takes one operand")
        a = as_tensor(a)
        A = a.data
        if kind == "relu":
            return _record("relu", (a,), np.maximum(A, 0.0), lambda g: (g * (A > 0),))
        out = _sigmoid(A)
        return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    if kind in _BINARY:
        if b is None:
            raise UsageError(f"elementwise {kind!r} takes two operands")
        a, b = as_tensor(a), as_tensor(b)
        _check_binary(kind, a, b)
        A, B = a.data, b.data
        sa, sb = a.shape, b.shape
        if kind == "add":
            return _record("add", (a, b), A + B, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
        if kind == "sub":
            return _record("sub", (a, b), A - B, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
        return _record("mul", (a, b), A * B, lambda g: (_unbroadcast(g * B, sa), _unbroadcast(g * A, sb)))

    raise UsageError(f"unknown elementwise kind {kind!r}")


def relu(a: ArrayLike) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a: ArrayLike) -> Tensor:
    return elementwise("sigmoid", a)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise("add", a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: ArrayLike, factor: float) -> Tensor:
    return mul(a, Tensor(factor, dtype=as_tensor(a).dtype))


def reduce(kind: str, inputs, axis: Optional[int] = None) -> Tensor:
    """
    kind="sum" / "mean": reduce one tensor (all elements, or along `axis`).
    kind="max_elementwise_over_list": element-wise max over a list of
    same-shape tensors; the adjoint goes to the first input holding the max.
    """
    if kind in ("sum", "mean"):
        a = as_tensor(inputs)
        A = a.data
        if axis is None:
            count = A.size
            out = A.sum()
        else:
            if axis < 0 or axis >= A.ndim:
                raise DimensionError(f"{kind} axis {axis} out of range for shape {a.shape}")
            count = A.shape[axis]
            out = A.sum(axis=axis)
        if kind == "mean":
            out = out / count

        def adjoint(g):
            g = g / count if kind == "mean" else g
            if axis is None:
                return (np.full(A.shape, g, dtype=A.dtype),)
            return (np.array(np.broadcast_to(np.expand_dims(g, axis), A.shape)),)

        return _record(kind, (a,), np.asarray(out), adjoint)

    if kind == "max_elementwise_over_list":
        tensors = [as_tensor(t) for t in inputs]
        if not tensors:
            raise DimensionError("max over an empty list of tensors")
        shape = tensors[0].shape
        for t in tensors[1:]:
            if t.shape != shape:
                raise DimensionError(f"max over list shape mismatch: {shape} vs {t.shape}")
        stacked = np.stack([t.data for t in tensors])
        # np.argmax returns the first occurrence, so ties go to the earliest input
        winner = np.argmax(stacked, axis=0)
        out = np.take_along_axis(stacked, winner[None, ...], axis=0)[0]

        def adjoint(g):
            return tuple(g * (winner == k) for k in range(len(tensors)))

        return _record("max_list", tuple(tensors), out, adjoint)

    raise UsageError(f"unknown reduce kind {kind!r}")


def reduce_sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return reduce("sum", a, axis=axis)


def reduce_mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return reduce("mean", a, axis=axis)


def max_over_list(tensors: Sequence[ArrayLike]) -> Tensor:
    return reduce("max_elementwise_over_list", tensors)


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _record("reshape", (a,), out.copy(), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim if ndim else 0
    for t in tensors[1:]:
        other = [d for i, d in enumerate(t.shape) if i != ax]
        first = [d for i, d in enumerate(tensors[0].shape) if i != ax]
        if t.ndim != ndim or other != first:
            raise DimensionError(f"concat shape mismatch: {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record("concat", tuple(tensors), out, adjoint)


def repeat_rows(vector: ArrayLike, n: int) -> Tensor:
    """Copy a 1-D vector onto `n` rows: (F,) -> (n, F)."""
    v = as_tensor(vector)
    if v.ndim != 1:
        raise DimensionError(f"repeat_rows expects a vector, got shape {v.shape}")
    if n < 1:
        raise DimensionError(f"repeat_rows needs n >= 1, got {n}")
    return _record("repeat_rows", (v,), np.tile(v.data, (n, 1)), lambda g: (g.sum(axis=0),))


def take_rows(a: ArrayLike, index: Sequence[int]) -> Tensor:
    """Gather rows of a matrix (or entries of a vector) by position."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim not in (1, 2) or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise DimensionError(f"take_rows index out of range for shape {a.shape}")
    src = a.shape

    def adjoint(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take_rows", (a,), a.data[idx], adjoint)


def select(a: ArrayLike, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather a[rows[k], cols[k]] into a vector."""
    a = as_tensor(a)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or r.shape != c.shape:
        raise DimensionError(f"select needs a matrix and matching index lists, got {a.shape}, {r.shape}, {c.shape}")
    src = a.shape

    def adjoint(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, (r, c), g)
        return (out,)

    return _record("select", (a,), a.data[r, c], adjoint)


def softmax(a: ArrayLike) -> Tensor:
    """Softmax along the last axis."""
    a = as_tensor(a)
    A = a.data
    shifted = A - A.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), out, adjoint)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    A = a.data
    if np.any(A <= 0):
        raise NumericError("log of a non-positive value", {"min": float(A.min())})
    return _record("log", (a,), np.log(A), lambda g: (g / A,))


def clamp(a: ArrayLike, low: float, high: float) -> Tensor:
    """Clip into [low, high]; values clipped away get no gradient."""
    a = as_tensor(a)
    A = a.data
    inside = (A >= low) & (A <= high)
    return _record("clamp", (a,), np.clip(A, low, high), lambda g: (g * inside,))
