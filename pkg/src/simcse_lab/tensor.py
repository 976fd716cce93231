"""Reverse-mode autodiff over float64 numpy arrays.

Every op output gets a creation id from a global counter. Inputs always exist
before outputs, so sorting reachable nodes by id is a valid topological order
and ``backward`` simply walks them in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, ParameterError
from .rng import RngState

_next_id = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn", "op", "id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.id = next(_next_id)

    @classmethod
    def from_op(cls, values, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        """Wrap an op result. ``backward_fn(grad_out)`` returns one grad (or None) per parent."""
        t = cls.__new__(cls)
        t.values = values
        t.grad = None
        t.op = op
        t.id = next(_next_id)
        t.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if t.requires_grad:
            t.parents = tuple(parents)
            t.backward_fn = backward_fn
        else:
            t.parents = ()
            t.backward_fn = None
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * out / b.values, b.shape),
        ),
        "div",
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.values), (x,), lambda g: (g / x.values,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.values)
    return Tensor.from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    return Tensor.from_op(
        kernels.gelu(x.values), (x,), lambda g: (kernels.gelu_backward(x.values, g),), "gelu"
    )


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor.from_op(
        x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape"
    )


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(
        x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose"
    )


def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.values)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(np.array(x.values[index]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor.from_op(
        np.concatenate([t.values for t in tensors], axis=axis), tensors, bw, "concat"
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched product over identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (
        a.ndim >= 2
        and a.ndim == b.ndim
        and a.shape[:-2] == b.shape[:-2]
        and a.shape[-1] == b.shape[-2]
    )
    if not ok:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return Tensor.from_op(av @ bv, (a, b), bw, "matmul")


# ---------------------------------------------------------------- fused nn ops


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    shape = x.shape
    y = kernels.softmax_rows(np.ascontiguousarray(x.values.reshape(-1, shape[-1])))

    def bw(g):
        return (kernels.softmax_rows_backward(y, np.ascontiguousarray(g.reshape(y.shape))).reshape(shape),)

    return Tensor.from_op(y.reshape(shape), (x,), bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x)


def log_softmax(x: Tensor) -> Tensor:
    shape = x.shape
    y = kernels.log_softmax_rows(np.ascontiguousarray(x.values.reshape(-1, shape[-1])))

    def bw(g):
        return (
            kernels.log_softmax_rows_backward(y, np.ascontiguousarray(g.reshape(y.shape))).reshape(shape),
        )

    return Tensor.from_op(y.reshape(shape), (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then apply gain and bias."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    shape = x.shape
    d = shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: input {shape} needs gain/bias of shape ({d},), got {gain.shape}/{bias.shape}"
        )
    y, xhat, rstd = kernels.layer_norm_forward(
        np.ascontiguousarray(x.values.reshape(-1, d)), gain.values, bias.values, float(eps)
    )

    def bw(g):
        gx, gg, gb = kernels.layer_norm_backward(
            np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gain.values
        )
        return gx.reshape(shape), gg, gb

    return Tensor.from_op(y.reshape(shape), (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, rate: float, rng: RngState | None, training: bool) -> Tensor:
    """Inverted dropout; draws one uniform per element from ``rng`` when active."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.uniform(x.shape) >= rate
    scale = keep * (1.0 / (1.0 - rate))
    return Tensor.from_op(x.values * scale, (x,), lambda g: (g * scale,), "dropout")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]``; gradient scatter-adds back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    flat = np.ascontiguousarray(ids.reshape(-1))
    n_rows, d = weight.shape

    def bw(g):
        return (kernels.embedding_backward(flat, np.ascontiguousarray(g.reshape(-1, d)), n_rows),)

    return Tensor.from_op(weight.values[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """All graph nodes reachable from ``root``, in creation (= topological) order."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.id: np.ones_like(loss.values)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg


def grad_check(
    f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is called with the tensor(s) in ``x`` and must rebuild its graph on
    every call. Error per element is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.values) if t.grad is None else t.grad.copy()
        flat = t.values.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            with no_grad():
                fp = f(*xs).item()
            flat[i] = old - h
            with no_grad():
                fm = f(*xs).item()
            flat[i] = old
            numeric = (fp - fm) / (2 * h)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    return worst
