"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the interaction model needs are provided.
Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient; outside a tape they simply compute.

Matrix products go through ``np.einsum`` rather than BLAS. BLAS picks
different edge kernels depending on the row count, so removing a node from
a graph could change the rounding of the remaining rows. ``einsum`` keeps a
fixed per-element accumulation order, which makes the graph outputs
bit-stable under node removal.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "transpose",
    "add",
    "mul",
    "scale",
    "relu",
    "softmax_row",
    "layer_norm",
    "concat_lastdim",
    "take_rows",
    "reshape",
    "reduce_max",
    "reduce_mean",
    "sum_all",
    "linear",
    "cross_entropy",
    "ShapeError",
]

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense real array, optionally tracked for gradients.

    ``dtype`` sets the precision (float64 by default; training may use
    float32). ``grad`` is allocated lazily by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._from_op = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._from_op = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._from_op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded.
    A tape belongs to one thread.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and t.is_leaf:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Leaves on the tape that the loss does not reach receive a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(rec.output is loss for rec in tape.records):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for leaf in tape.leaves():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    result = Tensor._wrap(out)
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._from_op = True
        stack[-1].records.append(_Record(op, inputs, result, vjp))
    return result


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ik,kj->ij", a, b)


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return _mm(g, bd.T), _mm(ad.T, g)

    return _emit("matmul", (a, b), _mm(ad, bd), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,))


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row added to every row of ``a``."""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if a.data.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        bshape = b.shape
        return _emit(
            "add_bias", (a, b), a.data + b.data.reshape(1, -1),
            lambda g: (g, g.sum(axis=0).reshape(bshape)),
        )
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    return _emit("relu", (x,), np.where(live, x.data, 0).astype(x.dtype), lambda g: (g * live,))


# --- normalisations -------------------------------------------------------


def softmax_row(x: Tensor, mask) -> Tensor:
    """Row softmax restricted to entries where ``mask`` is 1.

    Masked-out entries are exactly zero. Every row must keep at least one
    entry. Row sums use a sequential running sum so zero entries never
    perturb the result.
    """
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    if m.shape != x.shape or x.data.ndim != 2:
        raise ShapeError(f"softmax_row: mask {m.shape} does not match logits {x.shape}")
    if not m.any(axis=1).all():
        raise ValueError("softmax_row: every row needs at least one unmasked entry")
    xd = x.data
    row_max = np.where(m, xd, -np.inf).max(axis=1, keepdims=True)
    e = np.where(m, np.exp(np.where(m, xd - row_max, 0)), 0).astype(xd.dtype)
    denom = np.cumsum(e, axis=1)[:, -1:]
    y = e / denom

    def vjp(g):
        inner = np.cumsum(g * y, axis=1)[:, -1:]
        return (y * (g - inner),)

    return _emit("softmax_row", (x,), y, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardisation (population variance, eps under the root) then affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects (n, D), got {x.shape}")
    d = x.shape[1]
    if d < 2:
        raise ShapeError("layer_norm needs D >= 2")
    if gain.data.size != d or bias.data.size != d:
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs D={d}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data.reshape(1, d)
    out = xhat * gd + bias.data.reshape(1, d)
    gshape, bshape = gain.shape, bias.shape

    def vjp(g):
        dgain = (g * xhat).sum(axis=0).reshape(gshape)
        dbias = g.sum(axis=0).reshape(bshape)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, dgain, dbias

    return _emit("layer_norm", (x, gain, bias), out.astype(xd.dtype), vjp)


# --- structural -----------------------------------------------------------


def concat_lastdim(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ShapeError("concat_lastdim needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_lastdim: leading dims {t.shape[:-1]} != {lead}")
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit("concat_lastdim", tuple(tensors), np.concatenate([t.data for t in tensors], axis=-1), vjp)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take_rows: index out of range for {n} rows")
    return _emit("take_rows", (x,), x.data[idx], vjp)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; backward routes to the lowest-index argmax."""
    arg = np.argmax(x.data, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, arg_k, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, arg_k, gk, axis=axis)
        return (dx,)

    return _emit("reduce_max", (x,), out if keepdims else np.squeeze(out, axis), vjp)


def reduce_mean(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis]
    shape = x.shape

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, shape).copy(),)

    return _emit("reduce_mean", (x,), x.data.mean(axis=axis, keepdims=keepdims), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum_all", (x,), np.asarray(x.data.sum()).reshape(()), lambda g: (np.full(shape, g, dtype=x.dtype),))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` with ``W`` stored as (in, out)."""
    out = matmul(x, W)
    return out if b is None else add(out, b)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a single row of logits."""
    z = logits.data.reshape(-1)
    c = z.size
    if not 0 <= int(label) < c:
        raise ValueError(f"label {label} outside [0, {c})")
    zmax = z.max()
    e = np.exp(z - zmax)
    s = e.sum()
    loss = np.log(s) + zmax - z[label]
    p = e / s
    lshape = logits.shape

    def vjp(g):
        d = p.copy()
        d[label] -= 1.0
        return ((d * g).reshape(lshape),)

    return _emit("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype).reshape(()), vjp)
