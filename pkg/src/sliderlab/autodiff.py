"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records a node with a closure that maps the output gradient
to input gradients. Graphs are single-use: ``backward`` consumes the graph
and frees the saved forward values.

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = reduce_sum(x * x)
    backward(loss)
    x.grad  # array([2., 4., 6.])
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "GraphError",
    "no_grad", "is_grad_enabled", "forward_op", "backward", "OP_KINDS",
    "add", "mul", "matmul", "reduce_sum", "reduce_mean", "softmax",
    "layernorm", "gelu", "embed_lookup", "concat", "slice_", "scatter_rows",
    "scale", "reshape", "transpose", "mse",
]

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Build tensors without recording graph nodes (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf",
                 _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        # one reduction instead of an elementwise isfinite pass; any NaN/Inf poisons the sum
        if _check and not np.isfinite(np.add.reduce(arr, axis=None)):
            raise NonFiniteError(f"non-finite values in {op} output")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return slice_(self, index)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], grad_fn: Callable, op: str, check: bool = True) -> Tensor:
    # layout ops (check=False) only move finite values around
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), grad_fn, op, check)
    return Tensor(data, False, (), None, op, check)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    g = grad.sum(axis=tuple(range(lead))) if lead > 0 else grad
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale factor must be finite")
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    k = np.sqrt(2.0 / np.pi)
    x2 = x * x
    th = np.tanh(k * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        du = k * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(out, (a,), grad_fn, "gelu")


# --------------------------------------------------------------------------
# linear algebra and reductions
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` may be 2-D (shared weight) or carry the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise ShapeError("matmul: left operand must carry the batch axes")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), grad_fn, "reduce-sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(out, (a,), grad_fn, "reduce-mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _make(y, (a,), grad_fn, "softmax")


def layernorm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis; no affine parameters."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), grad_fn, "layernorm")


# --------------------------------------------------------------------------
# indexing and layout
# --------------------------------------------------------------------------

def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embed-lookup ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embed-lookup table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embed-lookup id out of range")
    vshape = table.shape

    def grad_fn(g):
        out = np.zeros(vshape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, vshape[1]))
        return (out,)

    return _make(table.data[ids], (table,), grad_fn, "embed-lookup", check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat", check=False)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view) indexing: ints and slices only."""
    idx = index if isinstance(index, tuple) else (index,)
    if any(not isinstance(i, (slice, int, type(Ellipsis))) for i in idx):
        raise ShapeError("slice supports ints, slices and Ellipsis only")
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _make(a.data[index].copy(), (a,), grad_fn, "slice", check=False)


def scatter_rows(base: Tensor, updates: Tensor, indices) -> Tensor:
    """Replace rows ``indices`` of a 2-D ``base`` with the rows of ``updates``."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if base.ndim != 2 or updates.ndim != 2:
        raise ShapeError("scatter-rows expects 2-D base and updates")
    n, d = base.shape
    if updates.shape != (idx.size, d):
        raise ShapeError(f"scatter-rows: updates {updates.shape} vs {idx.size} indices of width {d}")
    if idx.size:
        if idx.min() < 0 or idx.max() >= n:
            raise IndexError("scatter-rows index out of range")
        if np.unique(idx).size != idx.size:
            raise IndexError("scatter-rows indices must be distinct")
    out = base.data.copy()
    out[idx] = updates.data

    def grad_fn(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return _make(out, (base, updates), grad_fn, "scatter-rows", check=False)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape", check=False)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad transpose axes {axes} for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose", check=False)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    d = a - b
    return reduce_mean(d * d)


OP_KINDS = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "reduce-sum": reduce_sum,
    "reduce-mean": reduce_mean,
    "softmax": softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "embed-lookup": embed_lookup,
    "concat": concat,
    "slice": slice_,
    "scatter-rows": scatter_rows,
    "scale": scale,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch by op-kind name, e.g. ``forward_op("softmax", [x], axis=-1)``."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def _topo(root: Tensor) -> list:
    order, seen = [], set()
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
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    Returns a map from leaf id to its gradient for this pass.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        return {}
    order = _topo(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    result = {}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if node._parents:
            if node._backward is None:
                raise GraphError("graph already consumed by a previous backward pass")
            if g is not None:
                for p, gp in zip(node._parents, node._backward(g)):
                    if not p.requires_grad:
                        continue
                    if p.id in grads:
                        grads[p.id] = grads[p.id] + gp
                    else:
                        grads[p.id] = gp
            node._backward = None
            node._parents = ()
            node._consumed = True
        elif node.requires_grad:
            if g is None:
                g = np.zeros_like(node.data)
            result[node.id] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
    loss._consumed = True
    return result
