"""Channel fusion and Gram-matrix channel attention."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbones import ThreeDFeature, TwoDFeature
from .layers import BatchNorm, Conv2d, Module
from .tensor import ShapeError, Tensor

__all__ = ["fuse_concat", "gram", "attention_map", "apply_attention", "CFAM", "cfam_forward"]


def fuse_concat(f2d, f3d) -> Tensor:
    """Stack 3D channels first, then 2D channels.

    Accepts single features (``[C, H', W']``) or batches (``[N, C, H', W']``).
    """
    a = f2d.data if isinstance(f2d, TwoDFeature) else f2d
    b = f3d.data if isinstance(f3d, ThreeDFeature) else f3d
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"grids differ: 2D {a.shape[-2:]} vs 3D {b.shape[-2:]}")
    return T.concat([b, a], axis=-3)


def gram(F: Tensor) -> Tensor:
    """``F @ F^T`` over the last two axes: ``[.., C, N] -> [.., C, C]``."""
    axes = tuple(range(F.ndim - 2)) + (F.ndim - 1, F.ndim - 2)
    return T.matmul(F, T.transpose(F, axes))


def attention_map(G: Tensor) -> Tensor:
    """Row-wise softmax of the Gram matrix; row i weighs every channel j for channel i."""
    return T.softmax_rows(G, axis=-1)


def apply_attention(M: Tensor, F: Tensor, B: Tensor, alpha) -> Tensor:
    """``alpha * reshape(M @ F) + B``."""
    if F.shape[-2] != B.shape[-3] or F.shape[-1] != B.shape[-2] * B.shape[-1]:
        raise ShapeError(f"F {F.shape} is not a vectorization of B {B.shape}")
    if M.shape[-1] != F.shape[-2] or M.shape[-2] != M.shape[-1]:
        raise ShapeError(f"attention map {M.shape} does not match {F.shape[-2]} channels")
    attended = T.matmul(M, F).reshape(B.shape)
    return attended * alpha + B


def _vectorize(B: Tensor) -> Tensor:
    return B.reshape(B.shape[:-2] + (B.shape[-2] * B.shape[-1],))


class CFAM(Module):
    """Two 3x3 convs -> Gram attention with a residual scalar -> two 3x3 convs.

    ``in_channels`` is ``C' + C''``, ``mid_channels`` the attention width
    ``C``, ``out_channels`` the output width ``C*``.
    """

    def __init__(self, in_channels: int, out_channels: int, mid_channels=None, attention: bool = True, rng=None):
        rng = np.random.default_rng(2) if rng is None else rng
        mid = mid_channels or 2 * out_channels
        self.conv_in = [Conv2d(in_channels, mid, 3, padding=1, bias=False, rng=rng),
                        Conv2d(mid, mid, 3, padding=1, bias=False, rng=rng)]
        self.norm_in = [BatchNorm(mid), BatchNorm(mid)]
        self.conv_out = [Conv2d(mid, out_channels, 3, padding=1, bias=False, rng=rng),
                         Conv2d(out_channels, out_channels, 3, padding=1, bias=False, rng=rng)]
        self.norm_out = [BatchNorm(out_channels), BatchNorm(out_channels)]
        self.alpha = Tensor(0.0, requires_grad=True)
        self.attention = attention
        self.in_channels = in_channels
        self.out_channels = out_channels

    def attend(self, B: Tensor) -> Tensor:
        F = _vectorize(B)
        return apply_attention(attention_map(gram(F)), F, B, self.alpha)

    def forward(self, A: Tensor, attention=None) -> Tensor:
        """``A``: ``[N, C'+C'', H', W']`` -> ``[N, C*, H', W']``."""
        if A.shape[1] != self.in_channels:
            raise ShapeError(f"fused map has {A.shape[1]} channels, CFAM expects {self.in_channels}")
        x = A
        for conv, norm in zip(self.conv_in, self.norm_in):
            x = T.relu(norm(conv(x)))
        if self.attention if attention is None else attention:
            x = self.attend(x)
        for conv, norm in zip(self.conv_out, self.norm_out):
            x = T.relu(norm(conv(x)))
        return x


def cfam_forward(A: Tensor, params: CFAM) -> Tensor:
    return params(A)
