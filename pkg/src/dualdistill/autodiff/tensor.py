"""Dense tensors with reverse-mode automatic differentiation.

Every op computes its forward value eagerly with numpy and, when any input
requires a gradient, records a closure that maps the output gradient back to
its inputs. ``Tensor.backward`` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

MASK_FILL = -1e9
KL_EPS = 1e-8
LN_EPS = 1e-5

_state = {"dtype": np.float32, "grad_enabled": True}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateRowError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors (used by gradient checks)."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- autograd ---------------------------------------------------------
    def backward(self) -> None:
        if self.size != 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; rebuild the forward pass first")
        if not self.requires_grad:
            raise GraphError("loss is detached from every parameter (requires_grad=False)")
        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._parents = ()
            node._backward = None
        self._consumed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("division only by Python scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def topological_order(root: Tensor) -> list:
    """Iterative DFS postorder; each node appears once."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    _check_finite(data, op)
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.op = op
    out._consumed = False
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(out, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: ((a, -g),))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), "scale", lambda g: ((a, g * c),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(out, (a, b), "mul", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: ((a, g / a.data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; the gradient is zero where clipping was active."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), "clamp", lambda g: ((a, g * inside),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return ((a, g * d),)

    return _make(out.astype(x.dtype, copy=False), (a,), "gelu", backward)


# -- shape ops ------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    return _make(out, (a,), "reshape", lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; with no axes, swap the last two (matrix transpose)."""
    if axes is None or len(axes) == 0:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: ((a, g.transpose(inv)),))


def slice_(a: Tensor, idx) -> Tensor:
    """Basic (non-advanced) indexing."""
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return _make(np.array(out, order="C"), (a,), "slice", backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[-2] if a.ndim >= 2 else a.shape[0]
    if not (0 <= start <= stop <= n):
        raise IndexError(f"slice_rows [{start}:{stop}] out of range for {n} rows")
    if a.ndim == 1:
        return slice_(a, slice(start, stop))
    return slice_(a, (Ellipsis, slice(start, stop), slice(None)))


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor by integer index (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return ((a, full),)

    return _make(a.data[idx], (a,), "take_rows", backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    flat = ids.reshape(-1)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, flat, g.reshape(-1, table.shape[1]))
        return ((table, full),)

    return _make(table.data[ids], (table,), "embedding", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, sizes, axis=axis)))

    return _make(out, tuple(tensors), "concat", backward)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-2 if as_tensor(tensors[0]).ndim >= 2 else 0)


# -- reductions -------------------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(np.asarray(out), (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(Batched) matrix product; differentiable in both arguments."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: cannot broadcast batch dims of {a.shape} and {b.shape}") from e

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: contract over every leading axis at once
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            (a, None if ga is None else _unbroadcast(ga, a.shape)),
            (b, None if gb is None else _unbroadcast(gb, b.shape)),
        )

    return _make(out, (a, b), "matmul", backward)


# -- normalisation / probability ----------------------------------------------
def softmax_rows(x: Tensor, key_mask=None) -> Tensor:
    """Softmax over the last axis.

    ``key_mask`` is a boolean array broadcastable to ``x`` (True = keep);
    masked keys receive an additive -1e9 before normalisation.
    """
    z = x.data
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not np.broadcast_to(key_mask, z.shape).any(axis=-1).all():
            raise DegenerateRowError("softmax row has every key masked")
        z = z + np.where(key_mask, 0.0, MASK_FILL).astype(z.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((x, y * (g - (g * y).sum(axis=-1, keepdims=True))),)

    return _make(y, (x,), "softmax", backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return ((x, g - np.exp(out) * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), "log_softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis, then apply gain and bias.

    The variance is floored at ``eps`` so a constant row maps to zeros.
    """
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.maximum(var, eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            floored = var < eps
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True))
            # below the floor inv is constant, so no variance path
            gx -= np.where(floored, 0.0, inv * xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(d.ndim - 1))
        return (
            (x, gx),
            (gain, (g * xhat).sum(axis=red) if gain.requires_grad else None),
            (bias, g.sum(axis=red) if bias.requires_grad else None),
        )

    return _make(out.astype(d.dtype, copy=False), (x, gain, bias), "layer_norm", backward)


def kl_rows(p: Tensor, q: Tensor, row_mask=None, check: bool = True) -> Tensor:
    """Mean over rows of sum_j p_j ln(p_j / q_j), both arguments clamped at 1e-8.

    ``row_mask`` (boolean, shape = leading dims of ``p``) excludes rows from the
    mean. Differentiable with respect to both arguments.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_rows: shape mismatch {p.shape} vs {q.shape}")
    if check:
        for name, t in (("p", p), ("q", q)):
            s = t.data.sum(axis=-1)
            if np.abs(s - 1.0).max(initial=0.0) > 1e-4:
                raise ValueError(f"kl_rows: {name} has a row summing to {s.flat[np.abs(s - 1).argmax()]:.6f}")
    pc = np.maximum(p.data, KL_EPS)
    qc = np.maximum(q.data, KL_EPS)
    lp, lq = np.log(pc), np.log(qc)
    row = (p.data * (lp - lq)).sum(axis=-1)
    if row_mask is None:
        w = np.full(row.shape, 1.0 / row.size, dtype=row.dtype)
    else:
        m = np.broadcast_to(np.asarray(row_mask, dtype=bool), row.shape)
        if not m.any():
            raise DegenerateRowError("kl_rows: every row is masked")
        w = m.astype(row.dtype) / m.sum()
    out = np.asarray((row * w).sum(), dtype=row.dtype)

    def backward(g):
        gw = (g * w)[..., None]
        gp = gw * (lp - lq + (p.data > KL_EPS)) if p.requires_grad else None
        gq = -gw * p.data / qc * (q.data > KL_EPS) if q.requires_grad else None
        return ((p, gp), (q, gq))

    return _make(out, (p, q), "kl_rows", backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over the last axis.

    Rows with target < 0 are ignored.
    """
    targets = np.asarray(targets, dtype=np.int64)
    lsm = log_softmax(logits)
    flat = lsm.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    keep = np.nonzero(t >= 0)[0]
    if keep.size == 0:
        raise ValueError("cross_entropy: no valid targets")
    picked = take_rows(flat, keep)
    onehot = np.zeros(picked.shape, dtype=picked.data.dtype)
    onehot[np.arange(keep.size), t[keep]] = 1.0
    return scale(sum_(mul(picked, Tensor(onehot))), -1.0 / keep.size)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
