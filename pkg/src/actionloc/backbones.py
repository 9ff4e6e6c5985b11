"""Small 2D (key frame) and 3D (clip) feature extractors.

Both reduce an ``H x W`` input to an ``H/S x W/S`` grid. The 3D extractor also
collapses the clip depth ``D`` to 1: every stage but the last halves the
depth, and the last stage uses a temporal kernel spanning whatever depth is
left, without temporal padding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Conv2d, Conv3d, Module
from .tensor import ShapeError, Tensor

__all__ = ["BackboneConfig", "Backbone2D", "Backbone3D", "TwoDFeature", "ThreeDFeature", "temporal_schedule"]


@dataclass
class BackboneConfig:
    """Shapes of both branches.

    ``widths_2d`` / ``widths_3d`` give one entry per stride-2 stage, so each
    list must have ``log2(stride)`` entries.
    """

    widths_2d: List[int] = field(default_factory=lambda: [16, 32, 64])
    widths_3d: List[int] = field(default_factory=lambda: [16, 32, 64])
    stride: int = 8
    clip_len: int = 8
    image_size: int = 64

    def __post_init__(self):
        n = int(round(np.log2(self.stride)))
        if 2 ** n != self.stride:
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        for name in ("widths_2d", "widths_3d"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} needs {n} entries for stride {self.stride}")
        temporal_schedule(self.clip_len, n)
        if self.image_size % self.stride:
            raise ValueError(f"image size {self.image_size} not divisible by stride {self.stride}")

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    @classmethod
    def paper_scale(cls, clip_len: int = 16) -> "BackboneConfig":
        """224x224 input at stride 32 (7x7 grid)."""
        return cls(widths_2d=[8, 8, 16, 16, 32], widths_3d=[8, 8, 16, 16, 32], stride=32,
                   clip_len=clip_len, image_size=224)


def temporal_schedule(depth: int, stages: int):
    """Per-stage (kernel depth, stride, padding) that reduces ``depth`` to 1."""
    if stages < 1:
        raise ValueError("need at least one stage")
    plan = []
    d = depth
    for _ in range(stages - 1):
        if d >= 2:
            plan.append((3, 2, 1))
            d = (d + 2 - 3) // 2 + 1
        else:
            plan.append((1, 1, 0))
    plan.append((d, 1, 0))
    if d > 8:
        raise ValueError(f"clip length {depth} is too long for {stages} stages")
    return plan


@dataclass
class TwoDFeature:
    data: Tensor
    video_id: Optional[str] = None
    key_index: Optional[int] = None


@dataclass
class ThreeDFeature:
    data: Tensor
    video_id: Optional[str] = None
    key_index: Optional[int] = None


class Backbone2D(Module):
    def __init__(self, cfg: BackboneConfig, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.stride = cfg.stride
        self.convs, self.norms = [], []
        cin = 3
        for w in cfg.widths_2d:
            self.convs.append(Conv2d(cin, w, 3, stride=2, padding=1, bias=False, rng=rng))
            self.norms.append(BatchNorm(w))
            cin = w
        self.out_channels = cin

    def forward(self, x: Tensor) -> Tensor:
        """``x``: ``[N, 3, H, W]`` key frames -> ``[N, C'', H/S, W/S]``."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected [N, 3, H, W], got {x.shape}")
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise ShapeError(f"input {x.shape[2:]} not divisible by stride {self.stride}")
        for conv, norm in zip(self.convs, self.norms):
            x = T.leaky_relu(norm(conv(x)), 0.1)
        return x

    def forward_2d(self, key_frame: Tensor, video_id=None, key_index=None) -> TwoDFeature:
        """Single frame ``[3, H, W]`` -> ``TwoDFeature`` of shape ``[C'', H', W']``."""
        out = self.forward(key_frame.reshape((1,) + key_frame.shape))
        return TwoDFeature(out.reshape(out.shape[1:]), video_id, key_index)


class Backbone3D(Module):
    def __init__(self, cfg: BackboneConfig, rng=None):
        rng = np.random.default_rng(1) if rng is None else rng
        self.stride = cfg.stride
        self.clip_len = cfg.clip_len
        self.convs, self.norms = [], []
        cin = 3
        for w, (kd, sd, pd) in zip(cfg.widths_3d, temporal_schedule(cfg.clip_len, len(cfg.widths_3d))):
            self.convs.append(Conv3d(cin, w, (kd, 3, 3), stride=(sd, 2, 2), padding=(pd, 1, 1), bias=False, rng=rng))
            self.norms.append(BatchNorm(w))
            cin = w
        self.out_channels = cin

    def forward(self, clip: Tensor) -> Tensor:
        """``clip``: ``[N, 3, D, H, W]`` -> ``[N, C', H/S, W/S]``."""
        if clip.ndim != 5 or clip.shape[1] != 3:
            raise ShapeError(f"expected [N, 3, D, H, W], got {clip.shape}")
        if clip.shape[2] != self.clip_len:
            raise ShapeError(f"clip has {clip.shape[2]} frames, backbone expects {self.clip_len}")
        if clip.shape[3] % self.stride or clip.shape[4] % self.stride:
            raise ShapeError(f"input {clip.shape[3:]} not divisible by stride {self.stride}")
        x = clip
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x)))
        n, c, d, h, w = x.shape
        assert d == 1
        return x.reshape((n, c, h, w))

    def forward_3d(self, clip: Tensor, video_id=None, key_index=None) -> ThreeDFeature:
        """Single clip ``[3, D, H, W]`` -> ``ThreeDFeature`` of shape ``[C', H', W']``."""
        out = self.forward(clip.reshape((1,) + clip.shape))
        return ThreeDFeature(out.reshape(out.shape[1:]), video_id, key_index)


def freeze(backbone: Module) -> None:
    backbone.freeze()
