"""Dense float64 tensors with a reverse-mode autodiff tape.

A :class:`Tensor` wraps a numpy array. Any tensor created with
``requires_grad=True`` is a leaf; every op applied to a tracked tensor
records a node holding its parents and a vector-Jacobian closure.
:func:`grad` walks the recorded graph in reverse topological order.

Weights decoded by one network can be fed straight into another network's
forward pass: they are ordinary tracked (non-leaf) tensors.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "BackwardError",
    "tensor",
    "as_tensor",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "tanh",
    "elu",
    "clip",
    "sum",
    "mean",
    "max",
    "logsumexp",
    "logsumexp_stable",
    "gather",
    "broadcast_to",
    "reshape",
    "concat",
    "segment_sum",
    "detach",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Operands of ``op`` cannot be combined."""

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


class BackwardError(RuntimeError):
    pass


class Tensor:
    """A float64 array plus (optionally) its place on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _vjp=None, op="leaf"):
        if _parents:
            arr = np.asarray(data, dtype=np.float64)
        else:
            arr = np.array(data, dtype=np.float64)
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp: Callable | None = _vjp
        self.op = op
        self.id = next(_ids)

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
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return gather(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), vjp, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), vjp, f"pow{p}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        g2 = np.asarray(g)
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2 if b.ndim > 1 else 0)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = _unbroadcast(g2 @ np.swapaxes(B, -1, -2), A.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g2, B.shape)
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _make(out, (a, b), vjp, "matmul")


# ----------------------------------------------------------------- unary ops


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg = a.data < 0
    em1 = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(neg, alpha * em1, a.data)

    def vjp(g):
        return (g * np.where(neg, alpha * (em1 + 1.0), 1.0),)

    return _make(out, (a,), vjp, "elu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def detach(a) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor(as_tensor(a).data.copy())


# ------------------------------------------------------------------ reductions


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)) if shape else g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / n)


def max(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max-reduce; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.data))
        out = a.data.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * a.ndim)

        def vjp(g):
            ga = np.zeros(a.size)
            ga[flat] = np.reshape(g, ())
            return (ga.reshape(a.shape),)

        return _make(out, (a,), vjp, "max")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def vjp(g):
        ga = np.zeros(a.shape)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, idx, gk, axis=axis)
        return (ga,)

    return _make(out, (a,), vjp, "max")


def _lse_array(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    c = np.max(x, axis=axis, keepdims=True)
    c = np.where(np.isfinite(c), c, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(x - c), axis=axis, keepdims=True)) + c
    if not keepdims:
        s = np.squeeze(s, axis=axis) if axis is not None else s.reshape(())
    return s


def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    """``c + log(sum(exp(a - c)))`` with ``c = max(a)``.

    All ``-inf`` inputs give ``-inf`` (and a zero gradient).
    """
    a = as_tensor(a)
    out = _lse_array(a.data, axis, keepdims)

    def vjp(g):
        o = out if keepdims or axis is None else np.expand_dims(out, axis)
        if axis is None:
            o = np.reshape(o, (1,) * a.ndim)
        with np.errstate(invalid="ignore"):
            soft = np.exp(a.data - o)
        soft = np.nan_to_num(soft, nan=0.0)
        return (_expand(g, a.shape, axis, keepdims) * soft,)

    return _make(out, (a,), vjp, "logsumexp")


def logsumexp_stable(values) -> Tensor:
    """Scalar log-sum-exp over every entry of ``values``."""
    v = as_tensor(values)
    if v.size == 0:
        raise ValueError("logsumexp_stable: empty input")
    return logsumexp(v, axis=None)


# ------------------------------------------------------------ shape plumbing


def gather(a, idx) -> Tensor:
    """``a[idx]`` for any numpy index (slices, integer arrays, masks)."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(np.array(out), (a,), vjp, "gather")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (np.reshape(g, a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (np.asarray(g).T,), "transpose")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", parts[0].shape, parts[-1].shape) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, parts, vjp, "concat")


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` sharing a segment id (1-D ``a`` or first axis)."""
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if ids.shape[0] != a.shape[0]:
        raise ShapeError("segment_sum", a.shape, ids.shape)
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, ids, a.data)
    return _make(out, (a,), lambda g: (g[ids],), "segment_sum")


# ------------------------------------------------------------------ backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, leaves: Sequence[Tensor], seed=None, check_finite: bool = True) -> list[np.ndarray]:
    """Reverse-mode gradients of ``loss`` with respect to ``leaves``.

    ``seed`` is the upstream cotangent; it defaults to 1 and is required
    when ``loss`` is not a scalar (this is how separately taped pieces of a
    computation are chained). Leaves that ``loss`` does not depend on get
    zeros. Any node may serve as a "leaf" here, not just true leaves.
    """
    if seed is None:
        if loss.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(loss.shape)
    else:
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), loss.shape)
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.id] = np.array(seed, dtype=np.float64)
        for node in reversed(_topo(loss)):
            g = grads.get(node.id)
            if g is None or node.is_leaf:
                continue
            if check_finite and not np.all(np.isfinite(g)):
                raise BackwardError(f"non-finite gradient at node #{node.id} ({node.op})")
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if check_finite and not np.all(np.isfinite(pg)):
                    raise BackwardError(f"non-finite gradient produced by node #{node.id} ({node.op})")
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = np.array(pg, dtype=np.float64)
    out = []
    for leaf in leaves:
        g = grads.get(leaf.id)
        if g is None:
            g = np.zeros(leaf.shape)
        elif check_finite and not np.all(np.isfinite(g)):
            raise BackwardError(f"non-finite gradient at node #{leaf.id} ({leaf.op})")
        out.append(np.reshape(g, leaf.shape))
    return out
