"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every operation in this module returns a new :class:`Tensor`.  When any input
requires a gradient (and recording is enabled) the output keeps a reference to
its inputs together with a closure that maps the output cotangent to input
cotangents.  :class:`Graph` linearises the recorded operations reachable from a
root into topological order and :func:`grad` / :func:`backward` sweep it in
reverse.

Elementwise binary ops follow numpy broadcasting; gradients are summed back to
each operand's shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, NumericalError

__all__ = [
    "Tensor", "Graph", "no_grad", "is_grad_enabled", "as_tensor",
    "backward", "grad", "gradcheck",
    "add", "sub", "mul", "div", "neg", "scale", "exp", "log", "sqrt", "power",
    "tanh", "sigmoid", "softplus", "silu", "gelu",
    "matmul", "sum", "mean_over_axis", "reshape", "transpose", "swapaxes",
    "getitem", "concat", "stack", "where", "cumsum_lastdim", "softmax_lastdim",
    "cross_entropy", "l2_norm", "rotate_pairs", "shift", "assert_finite",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    Leaves are created by the user; interior nodes are created by operations and
    remember their parents and a backward closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"tensor {name or ''} initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data, parents, backward_fn, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- array-like surface -----------------------------------------------------
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
        return self._backward is None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "detach"
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over_axis(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "const"
    out.name = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- graph ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Operations reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def _sweep(root: Tensor, keep: set[int] | None, seed=None) -> dict[int, np.ndarray]:
    graph = Graph.trace(root)
    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
    }
    for node in reversed(graph.nodes):
        key = id(node)
        g = grads.get(key)
        if g is None or node._backward is None:
            continue
        for parent, gp in zip(node._parents, node._backward(g)):
            if gp is None or not parent.requires_grad:
                continue
            pk = id(parent)
            prev = grads.get(pk)
            grads[pk] = gp if prev is None else prev + gp
        if keep is not None and key not in keep:
            del grads[key]
    return grads


def grad(root: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    """Return d(root)/d(w) for every ``w`` in ``wrt`` without touching ``.grad``.

    ``wrt`` may contain interior nodes of the graph.  Tensors that ``root``
    does not depend on get a zero array.  A non-scalar root needs ``seed``.
    """
    if seed is None and root.size != 1:
        raise ContractError(f"grad needs a scalar root or an explicit seed, got shape {root.shape}")
    keep = {id(w) for w in wrt}
    grads = _sweep(root, keep, seed)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(np.zeros_like(w.data) if g is None else np.array(g, dtype=np.float64).reshape(w.shape))
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    grads = _sweep(root, None)
    for node in Graph.trace(root).nodes:
        if node.is_leaf and node.requires_grad:
            g = grads.get(id(node))
            if g is None:
                g = np.zeros_like(node.data)
            g = np.array(g, dtype=np.float64).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g


def assert_finite(x: Tensor, context: str = "") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        bad = int(np.argmax(~np.isfinite(x.data).reshape(-1)))
        raise NumericalError(f"non-finite value at flat index {bad}" + (f" ({context})" if context else ""))
    return x


# -- elementwise -------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor._result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return Tensor._result(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
        "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    return Tensor._result(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "pow")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return Tensor._result(
        x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),), "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    z = x.data
    u = _GELU_C * (z + 0.044715 * z * z * z)
    t = np.tanh(u)
    out = 0.5 * z * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du),)

    return Tensor._result(out, (x,), back, "gelu")


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        np.where(cond, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                   _unbroadcast(np.where(cond, 0.0, g), b.shape)),
        "where")


# -- linear algebra / reductions -----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), back, "matmul")


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if not keepdims else g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return Tensor._result(
        np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims),), "sum")


def mean_over_axis(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.size / max(out.size, 1)
    return Tensor._result(
        out, (x,), lambda g: (_expand_reduced(g / n, x.shape, axis, keepdims),), "mean")


def l2_norm(x, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gk * x.data / safe, 0.0),)

    return Tensor._result(n if keepdims else np.squeeze(n, axis=axis), (x,), back, "l2_norm")


def cumsum_lastdim(x) -> Tensor:
    """Inclusive prefix sum along the last axis."""
    x = as_tensor(x)
    return Tensor._result(
        np.cumsum(x.data, axis=-1), (x,),
        lambda g: (np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1),), "cumsum")


def softmax_lastdim(x, mask=None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (boolean, broadcastable) marks admissible entries; the others get
    exactly zero weight.  Every row needs at least one admissible entry.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_lastdim: empty last dimension in shape {x.shape}")
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        m = np.where(mask, x.data, -np.inf).max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise DimensionError("softmax_lastdim: a row has no admissible entries")
        e = np.where(mask, np.exp(np.where(mask, x.data - m, 0.0)), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return Tensor._result(out, (x,), back, "softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [batch, classes]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"cross_entropy: labels must lie in [0, {c}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return Tensor._result(np.asarray(loss), (logits,), back, "cross_entropy")


# -- shape manipulation --------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return Tensor._result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(
        np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(idx)

    def back(g):
        z = np.zeros_like(x.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return Tensor._result(x.data[idx], (x,), back, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._result(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: shapes {[t.shape for t in ts]}") from None
    n = len(ts)
    return Tensor._result(
        out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def shift(x, k: int, axis: int) -> Tensor:
    """Delay by ``k`` steps along ``axis``: out[t] = x[t-k], zero for t < k."""
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    k = int(k)
    if k == 0:
        return x
    out = np.zeros_like(x.data)
    dst = [slice(None)] * x.ndim
    src = [slice(None)] * x.ndim
    dst[axis] = slice(min(k, n), None)
    src[axis] = slice(0, max(n - k, 0))
    out[tuple(dst)] = x.data[tuple(src)]

    def back(g):
        z = np.zeros_like(g)
        z[tuple(src)] = g[tuple(dst)]
        return (z,)

    return Tensor._result(out, (x,), back, "shift")


# -- paired-real rotation -----------------------------------------------------------


def rotate_pairs(x, angles) -> Tensor:
    """Rotate each feature pair ``(x[..., 2j], x[..., 2j+1])`` by ``angles[..., j]``.

    This is multiplication of the complex number ``x[2j] + i x[2j+1]`` by
    ``exp(i * angle)``.  ``angles`` broadcasts against ``x.shape[:-1] + (m,)``.
    """
    x, angles = as_tensor(x), as_tensor(angles)
    d = x.shape[-1]
    if d % 2:
        raise DimensionError(f"rotate_pairs: last dimension must be even, got {d}")
    m = d // 2
    if angles.ndim == 0 or angles.shape[-1] != m:
        raise DimensionError(f"rotate_pairs: angles {angles.shape} do not match {m} pairs of {x.shape}")
    c, s = np.cos(angles.data), np.sin(angles.data)
    xp = x.data.reshape(x.shape[:-1] + (m, 2))
    x0, x1 = xp[..., 0], xp[..., 1]
    o0 = x0 * c - x1 * s
    o1 = x0 * s + x1 * c
    full = np.broadcast_shapes(x.shape[:-1] + (m,), angles.shape)
    out = np.stack([np.broadcast_to(o0, full), np.broadcast_to(o1, full)], axis=-1)
    out = out.reshape(full[:-1] + (d,))

    def back(g):
        gp = g.reshape(full + (2,))
        g0, g1 = gp[..., 0], gp[..., 1]
        gx = None
        if x.requires_grad:
            gx0 = g0 * c + g1 * s
            gx1 = -g0 * s + g1 * c
            gx = _unbroadcast(np.stack([gx0, gx1], axis=-1).reshape(full[:-1] + (d,)), x.shape)
        ga = None
        if angles.requires_grad:
            ga = _unbroadcast(-g0 * o1 + g1 * o0, angles.shape)
        return gx, ga

    return Tensor._result(out, (x, angles), back, "rotate_pairs")


# -- gradient checking ---------------------------------------------------------------


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backward gradients and central differences.

    ``fn`` maps tensors built from ``inputs`` to a scalar tensor.  For each input
    the error is ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over
    the checked coordinates (all of them, or ``max_coords`` sampled ones).
    """
    arrays = [np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = grad(fn(*leaves), leaves)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for i, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(coords.size)
        for j, c in enumerate(coords):
            orig = flat[c]
            vals = []
            for sign in (1.0, -1.0):
                flat[c] = orig + sign * eps
                with no_grad():
                    vals.append(fn(*[as_tensor(a) for a in arrays]).item())
            flat[c] = orig
            numeric[j] = (vals[0] - vals[1]) / (2 * eps)
        a = analytic[i].reshape(-1)[coords]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric))
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst


def parameters_with_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
