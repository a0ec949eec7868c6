"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its parents and a closure mapping the output
gradient to the parent gradients.  Gradients are accumulated by
:meth:`Tensor.backward`, which walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_state = {"grad": True, "debug": False}


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf while debug mode is on."""


def set_debug(flag: bool) -> None:
    _state["debug"] = bool(flag)


def debug_enabled() -> bool:
    return _state["debug"]


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    old = _state["debug"]
    _state["debug"] = flag
    try:
        yield
    finally:
        _state["debug"] = old


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference only)."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``grad`` may be omitted only for single-element outputs.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward on non-scalar output of shape {self.shape} needs an explicit output_grad"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError(f"output_grad shape {grad.shape} != output shape {self.shape}")
        order = topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradient, inputs before users."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by node '{op}' (shape {data.shape})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"node '{op}': cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "subtract", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, "multiply", (a, b), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    # np.maximum keeps NaN, so divergence stays visible downstream
    return _make(np.maximum(x.data, 0.0), "relu", (x,), lambda g: (g * pos,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, "square", (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes.

    A 1-D right operand is treated as a column vector and the trailing
    axis is dropped from the result.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"node 'matmul': inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"node 'linear': input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ w.data
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)
    wd = w.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [
            (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None,
            flat.T @ g2 if w.requires_grad else None,
        ]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return grads

    return _make(out.reshape(lead + (wd.shape[1],)), "linear", parents, backward)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"node 'reshape': cannot reshape {src} to {tuple(shape)}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(
                f"node 'concat': shapes {[t.shape for t in ts]} disagree off axis {axis}"
            )
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=ax)

    return _make(np.concatenate([t.data for t in ts], axis=ax), "concat", ts, backward)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _make(x.data[index], "slice", (x,), backward)


def take_rows(table, index) -> Tensor:
    """Embedding lookup: ``table[index]`` over the first axis.

    The gradient scatter-adds back into the table, so repeated indices
    accumulate.
    """
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError(f"node 'take_rows': index out of range for table with {n} rows")
    shape = table.shape

    def backward(g):
        flat = g.reshape((-1,) + shape[1:])
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index.reshape(-1), flat)
        return (out,)

    return _make(table.data[index], "take_rows", (table,), backward)


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum", (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- normalisers


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"node 'layer_norm': gain/bias shapes {gamma.shape}, {beta.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), backward)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit RNG")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- composites


def attention(q, k, v, bias=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    ``bias`` is an additive constant (e.g. ``-1e30`` at padded keys), which
    makes masked weights underflow to exactly zero.  Returns the attended
    values and the weight matrix.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scores = mul(matmul(q, swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        scores = add(scores, bias)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def squared_error(pred, target) -> Tensor:
    """Per-row sum of squared differences over the last axis."""
    diff = sub(pred, target)
    return sum_(mul(diff, diff), axis=-1)
