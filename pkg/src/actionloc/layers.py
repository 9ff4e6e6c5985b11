"""Convolution and normalization layers on top of :mod:`actionloc.tensor`."""
from __future__ import annotations

from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, custom_op, get_dtype

__all__ = [
    "Module",
    "Conv2d",
    "Conv3d",
    "BatchNorm",
    "conv_nd",
    "conv2d_forward",
    "conv3d_forward",
    "batchnorm_forward",
]


class Module:
    """Minimal parameter container.

    Parameters are discovered from attributes: tensors with ``requires_grad``,
    child modules, and lists of child modules. Non-trainable state (running
    statistics) is declared by name in ``_buffers``.
    """

    training = True
    _buffers: Tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        missing = (set(params) | buffers) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype, copy=True)
        for name in buffers:
            owner, attr = self._resolve(name)
            current = getattr(owner, attr)
            setattr(owner, attr, np.array(state[name], dtype=current.dtype, copy=True))

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        obj = self
        i = 0
        while i < len(parts) - 1:
            value = getattr(obj, parts[i])
            if isinstance(value, (list, tuple)):
                value = value[int(parts[i + 1])]
                i += 1
            obj = value
            i += 1
        return obj, parts[-1]

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Exclude this module's parameters from optimizer updates."""
        for p in self.parameters():
            p.frozen = True
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.frozen = False
        return self


def _tuple(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def conv_nd(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride, padding) -> Tensor:
    """Cross-correlation over the trailing ``weight.ndim - 2`` axes of ``x``.

    ``x`` is ``[N, Cin, *spatial]`` and ``weight`` is ``[Cout, Cin, *kernel]``.
    """
    nsp = weight.ndim - 2
    if x.ndim != nsp + 2:
        raise ShapeError(f"expected a {nsp + 2}-d input, got shape {x.shape}")
    cout, cin, *kernel = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {cin}")
    stride = _tuple(stride, nsp)
    padding = _tuple(padding, nsp)
    insize = x.shape[2:]
    outsize = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(insize, padding, kernel, stride))
    if any(o <= 0 for o in outsize):
        raise ShapeError(f"kernel {tuple(kernel)} does not fit input {insize} with padding {padding}")

    xd = x.data
    if any(padding):
        xd = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    sp_axes = tuple(range(2, 2 + nsp))
    k_axes = tuple(range(2 + nsp, 2 + 2 * nsp))
    win = sliding_window_view(xd, tuple(kernel), axis=sp_axes)
    win = win[(slice(None), slice(None)) + tuple(slice(0, o * s, s) for o, s in zip(outsize, stride))]
    w = weight.data
    out = np.tensordot(win, w, axes=((1,) + k_axes, (1,) + tuple(range(2, 2 + nsp))))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + bias.data.reshape((1, cout) + (1,) * nsp)
    out = np.ascontiguousarray(out)
    padded_shape = xd.shape

    def backward(g):
        g_axes = (0,) + tuple(range(2, 2 + nsp))
        gw = np.tensordot(g, win, axes=(g_axes, (0,) + sp_axes)) if weight.requires_grad else None
        gb = g.sum(axis=g_axes) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # [N, *out, Cin, *kernel]
            gwin = np.tensordot(g, w, axes=((1,), (0,)))
            gpad = np.zeros(padded_shape, dtype=g.dtype)
            for offs in np.ndindex(*kernel):
                dst = (slice(None), slice(None)) + tuple(
                    slice(o, o + n * s, s) for o, n, s in zip(offs, outsize, stride))
                src = np.moveaxis(gwin[(Ellipsis,) + offs], -1, 1)
                gpad[dst] += src
            crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, insize))
            gx = gpad[crop]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return custom_op(out, parents, backward, f"conv{nsp}d")


def conv2d_forward(x: Tensor, layer: "Conv2d") -> Tensor:
    return layer(x)


def conv3d_forward(x: Tensor, layer: "Conv3d") -> Tensor:
    return layer(x)


class _ConvNd(Module):
    nsp = 2

    def __init__(self, cin: int, cout: int, kernel, stride=1, padding=0, bias: bool = True, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        kernel = _tuple(kernel, self.nsp)
        self.stride = _tuple(stride, self.nsp)
        self.padding = _tuple(padding, self.nsp)
        fan_in = cin * int(np.prod(kernel))
        # Kaiming-uniform, fan-in mode, gain sqrt(2)
        bound = np.sqrt(6.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin) + kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv_nd(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(_ConvNd):
    nsp = 2


class Conv3d(_ConvNd):
    nsp = 3


def batchnorm_forward(x: Tensor, layer: "BatchNorm", mode: Optional[str] = None) -> Tensor:
    """Normalize channel axis 1 of ``x`` by batch (train) or running (eval) statistics."""
    mode = mode or ("train" if layer.training else "eval")
    c = layer.scale.shape[0]
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, norm expects {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    gamma = layer.scale.data.reshape(bshape)
    beta = layer.shift.data.reshape(bshape)

    if mode == "eval":
        inv = 1.0 / np.sqrt(layer.running_var.reshape(bshape) + layer.eps)
        xhat = (xd - layer.running_mean.reshape(bshape)) * inv
        out = (gamma * xhat + beta).astype(xd.dtype)

        def backward(g):
            return (g * gamma * inv,
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))

        return custom_op(out, (x, layer.scale, layer.shift), backward, "batchnorm")

    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[0] < 2:
        raise ShapeError("batch norm in train mode needs a batch of at least 2")
    m = xd.size // c
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = (xd - mu) * inv
    out = (gamma * xhat + beta).astype(xd.dtype)
    mom = layer.momentum
    layer.running_mean = (1 - mom) * layer.running_mean + mom * mu.reshape(c)
    layer.running_var = (1 - mom) * layer.running_var + mom * var.reshape(c) * m / max(m - 1, 1)

    def backward(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return custom_op(out, (x, layer.scale, layer.shift), backward, "batchnorm")


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        dtype = get_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, mode: Optional[str] = None) -> Tensor:
        return batchnorm_forward(x, self, mode)
