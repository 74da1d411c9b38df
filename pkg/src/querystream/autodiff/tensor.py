"""Dense float64 tensors with an explicit reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside a tape every result is a plain
constant, which is how callers detach whole stretches of computation.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from querystream.errors import ContractError, ShapeError

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar; all routed through the recorded functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _bad_item(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.  A tape belongs
    to one thread.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Suspend recording inside the block, even if a tape is active."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape.nodes.append(_Node(out, parents, backward))
        return out
    return Tensor(data)


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns a map from each leaf that requires grad to its gradient; entries
    in ``params`` that the loss never touched get zeros.  ``.grad`` is set on
    every returned tensor.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                leaves[key] = parent
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        if key in grads:
            result[t] = grads[key]
    if params is not None:
        result = {p: result.get(p, np.zeros_like(p.data)) for p in params}
    for t, g in result.items():
        t.grad = g
    return result


# -- elementwise binaries ---------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> bool:
    """True if ``b`` broadcasts as a row vector over ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _sum_rows(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape != b.shape and a.ndim == 1 and b.ndim > 1:
        a, b = b, a
    row = _binary_shapes(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, _sum_rows(g) if row else g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    row = _binary_shapes(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -(_sum_rows(g) if row else g)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    if a.shape != b.shape and a.ndim == 1 and b.ndim > 1:
        a, b = b, a
    row = _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, (_sum_rows(gb) if row else gb)

    return _result(ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    r = 1.0 / a.data
    return _result(r, (a,), lambda g: (-g * r * r,))


# -- elementwise unaries ----------------------------------------------------

def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a: Tensor) -> Tensor:
    """``log(sigmoid(x))`` without overflow for large ``|x|``."""
    x = a.data
    y = -np.logaddexp(0.0, -x)
    return _result(y, (a,), lambda g: (g * _sigmoid(-x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,))


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.abs(x), (a,), lambda g: (g * np.sign(x),))


# -- reductions -------------------------------------------------------------

def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(a.data.sum(axis=ax), (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# -- linear algebra and layout ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched 3-D product with equal batch sizes."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    )
    if not ok:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    swap = (-1, -2)

    def bw(g):
        return g @ np.swapaxes(bd, *swap), np.swapaxes(ad, *swap) @ g

    return _result(ad @ bd, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(data, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows along axis 0 (repeats allowed)."""
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def bw(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), bw)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice of the last axis, ``[..., start:stop]``."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _result(a.data[..., start:stop], (a,), bw)


# -- fused normalisers ------------------------------------------------------

def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Affine-free layer norm over the last axis (population variance)."""
    d = x.shape[-1] if x.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm: last axis must have at least 2 entries, got shape {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: empty last axis in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)
