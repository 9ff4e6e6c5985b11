"""Dense tensors with reverse-mode differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` replays the nodes in
reverse topological order, summing gradients over repeated uses, then drops
the recorded graph.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "precision",
    "set_precision",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "relu",
    "leaky_relu",
    "sigmoid",
    "exp",
    "log",
    "matmul",
    "softmax_rows",
    "reshape",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled():
    return getattr(_state, "grad", True)


def set_precision(mode: str) -> None:
    """Set the default dtype for new tensors: ``"single"`` or ``"double"``."""
    _state.dtype = {"single": np.float32, "double": np.float64}[mode]


@contextlib.contextmanager
def precision(mode: str):
    old = get_dtype()
    set_precision(mode)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "frozen", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or get_dtype(), copy=True)
        if 0 in arr.shape:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.frozen = False
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._spent = False

    @classmethod
    def _wrap(cls, data, parents=(), backward=None, op="leaf"):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.frozen = False
        out._spent = False
        out._op = op
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # --- properties -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # --- autodiff ---------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._spent:
            raise RuntimeError("graph already consumed by a previous backward(); run the forward pass again")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")

        order = _toposort(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._spent = True
        self._spent = True

    # --- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _toposort(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_dtype()))


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._wrap(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._wrap(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._wrap(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd
    return Tensor._wrap(out, (a, b),
                        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return Tensor._wrap(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if exponent < 1 and np.any(x < 0):
        raise DomainError("fractional power of a negative value")
    out = x ** exponent
    return Tensor._wrap(out, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return Tensor._wrap(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = _as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return Tensor._wrap(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor._wrap(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow")
    return Tensor._wrap(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return Tensor._wrap(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = out == x
    return Tensor._wrap(out, (a,), lambda g: (g * inside,), "clamp")


def where(cond, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return Tensor._wrap(np.where(cond, a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)),
                        "where")


# --- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._wrap(ad @ bd, (a, b), backward, "matmul")


def softmax_rows(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (the last one by default), max-shifted."""
    a = _as_tensor(a)
    x = a.data
    if not np.all(np.isfinite(x)):
        raise DomainError("softmax of non-finite input")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(s, (a,), backward, "softmax")


# --- layout --------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return Tensor._wrap(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._wrap(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [_as_tensor(t) for t in items]
    ref = items[0].shape
    ax = axis % len(ref)
    for t in items[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: {t.shape} does not match {ref} outside axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in items])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor._wrap(np.concatenate([t.data for t in items], axis=ax), tuple(items), backward, "concat")


def take(a, index) -> Tensor:
    a = _as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._wrap(a.data[index], (a,), backward, "take")


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._wrap(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scalar_mul(reduce_sum(a, axis, keepdims), 1.0 / n)


# --- custom ops ----------------------------------------------------------

def custom_op(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, name: str) -> Tensor:
    """Register an op computed outside this module.

    ``backward`` receives the output gradient and must return one gradient
    (or ``None``) per parent, in order.
    """
    return Tensor._wrap(data, tuple(parents), backward, name)


# --- verification --------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, floor: float = 1e-6,
               coords: Optional[np.ndarray] = None) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` must return a scalar tensor. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. ``coords`` restricts the check to the
    given flat indices of ``x``.
    """
    x.grad = None
    x.requires_grad = True
    loss = f(x)
    if loss.requires_grad:
        loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    numeric = np.zeros(idx.size)
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    x.grad = None
    return float(np.max(np.abs(a - numeric) / denom)) if idx.size else 0.0
