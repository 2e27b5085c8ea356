"""Dense float64 tensors with a reverse-mode differentiation tape.

Broadcasting rule (the only one): for binary ops and batched matmul, the
shapes must either be equal or one must be a suffix of the other, in which
case the shorter operand is repeated over the leading axes of the longer
one.  ``[B, T, D] + [D]`` and ``[B, T, D] + [T, D]`` are fine;
``[B, T, D] + [B, 1, D]`` is a :class:`ShapeError`.

Recording only happens inside an active :class:`Tape` (``with Tape():``),
and only for ops that touch a tensor with ``requires_grad``.  Outside a
tape every op is a plain numpy computation.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError", "DegenerateInputError", "ContractError",
    "Tensor", "Tape", "Gradients", "as_tensor", "backward",
    "add", "sub", "mul", "scale", "gelu", "matmul", "transpose", "reshape",
    "softmax_rows", "layer_norm", "concat_axis", "slice_axis", "expand",
    "reduce_sum_axis", "reduce_mean_axis", "reduce_max_axis", "sum_all",
    "l2_normalize_rows", "take_rows", "gather_positions",
    "cross_entropy_with_logits",
]

SQRT_2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input lies where the operation is undefined (e.g. a zero-norm row)."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


_node_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node_id = next(_node_ids)
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.

    Records are appended as ops execute, so the list is topologically sorted
    by construction.  A tape belongs to one thread.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Vjp]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Vjp) -> None:
        out.requires_grad = True
        out.tape = self
        self.records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        buffers: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for out, inputs, vjp in reversed(self.records):
            g = buffers.get(out.node_id)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = buffers.get(inp.node_id)
                buffers[inp.node_id] = gi if prev is None else prev + gi
        return Gradients(buffers)


class Gradients:
    """Gradient buffers keyed by node id; unreachable tensors read as zeros."""

    def __init__(self, buffers: dict[int, np.ndarray]):
        self.buffers = buffers

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.buffers.get(t.node_id)
        if g is None:
            return np.zeros(t.shape)
        return np.asarray(g, dtype=np.float64).reshape(t.shape)

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self.buffers


def backward(loss: Tensor) -> Gradients:
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        # constant loss: nothing on any tape reaches it
        return Gradients({})
    return loss.tape.backward(loss)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# broadcasting

def _check_broadcast(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb} (leading-axis rule)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    return _emit(0.5 * x * (1.0 + erf(x / SQRT_2)), (a,),
                 lambda g: (g * _gelu_grad(x),))


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; batch axes follow the leading-axis rule."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # weight-style product: fold the leading axes into rows
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def vjp_flat(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), vjp_flat)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _emit(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),))


def concat_axis(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat_axis: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for extent {n}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    src = a.shape

    def vjp(g):
        out = np.zeros(src)
        out[index] = g
        return (out,)

    return _emit(a.data[index].copy(), (a,), vjp)


def expand(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of extent ``n``."""
    return _emit(np.broadcast_to(a.data, (n,) + a.shape).copy(), (a,), lambda g: (g.sum(axis=0),))


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup ``table[ids]`` along axis 0."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"take_rows: ids outside [0, {rows})")
    src = table.shape

    def vjp(g):
        out = np.zeros(src)
        np.add.at(out, ids, g)
        return (out,)

    return _emit(table.data[ids], (table,), vjp)


def gather_positions(a: Tensor, positions) -> Tensor:
    """Pick ``a[b, positions[b], :]`` for each leading index ``b``."""
    pos = np.asarray(positions, dtype=np.int64)
    if a.ndim != 3 or pos.shape != (a.shape[0],):
        raise ShapeError(f"gather_positions: need [B, T, D] and [B], got {a.shape} and {pos.shape}")
    rows = np.arange(a.shape[0])
    src = a.shape

    def vjp(g):
        out = np.zeros(src)
        out[rows, pos] = g
        return (out,)

    return _emit(a.data[rows, pos], (a,), vjp)


# ---------------------------------------------------------------------------
# reductions

def reduce_sum_axis(a: Tensor, axis: int) -> Tensor:
    ax = axis % a.ndim
    return _emit(a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),))


def reduce_mean_axis(a: Tensor, axis: int) -> Tensor:
    ax = axis % a.ndim
    n = a.shape[ax]
    return _emit(a.data.mean(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, a.shape).copy(),))


def reduce_max_axis(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient is split evenly among tied maxima."""
    ax = axis % a.ndim
    x = a.data
    m = x.max(axis=ax)
    hit = (x == np.expand_dims(m, ax)).astype(np.float64)
    share = hit / hit.sum(axis=ax, keepdims=True)
    return _emit(m, (a,), lambda g: (share * np.expand_dims(g, ax),))


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(src, float(g)),))


# ---------------------------------------------------------------------------
# normalisation

def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit(s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit (population) variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    inputs: tuple[Tensor, ...] = (a,)
    out = xhat
    gd = None
    if gain is not None:
        if gain.shape != (d,):
            raise ShapeError(f"layer_norm: gain shape {gain.shape} != ({d},)")
        gd = gain.data
        out = out * gd
        inputs += (gain,)
    if bias is not None:
        if bias.shape != (d,):
            raise ShapeError(f"layer_norm: bias shape {bias.shape} != ({d},)")
        out = out + bias.data
        inputs += (bias,)

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gx = g * gd if gd is not None else g
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return _emit(out, inputs, vjp)


def l2_normalize_rows(a: Tensor) -> Tensor:
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateInputError("l2_normalize_rows: zero-norm row")
    y = x / n
    return _emit(y, (a,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,))


# ---------------------------------------------------------------------------
# loss

def cross_entropy_with_logits(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(list(labels), dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_with_logits: logits {logits.shape} vs {labels.shape[0]} labels")
    b, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy_with_logits: label outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _emit(np.asarray(loss), (logits,), vjp)
