"""The two-branch detector: clip and key frame in, raw prediction grid out."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backbones import Backbone2D, Backbone3D, BackboneConfig
from .cfam import CFAM, fuse_concat
from .head import AnchorSet, DetectHead
from .layers import Conv2d, Module
from .tensor import Tensor, no_grad

__all__ = ["ModelConfig", "ActionDetector", "ABLATIONS"]

ABLATIONS = ("2d", "3d", "concat", "full")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 4
    num_anchors: int = 5
    cfam_out: int = 32
    cfam_mid: Optional[int] = None
    ablation: str = "full"
    # softmax over the first ``pose_classes`` classes, sigmoid over the rest; None = single-label
    pose_classes: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")


class ActionDetector(Module):
    """Backbones -> fusion -> CFAM -> 1x1 head.

    Ablations: ``2d`` / ``3d`` run a single branch whose features are
    projected by a 1x1 conv to the fused channel count; ``concat`` feeds the
    concatenated branches straight to the head, skipping the whole CFAM
    block; ``full`` is the complete model.
    """

    def __init__(self, cfg: ModelConfig, anchors: Optional[AnchorSet] = None):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        bc = cfg.backbone
        self.anchors = anchors or AnchorSet(np.tile([[1.5, 1.5]], (cfg.num_anchors, 1)) * np.linspace(0.8, 1.6, cfg.num_anchors)[:, None])
        if len(self.anchors) != cfg.num_anchors:
            raise ValueError(f"{len(self.anchors)} anchors given, config expects {cfg.num_anchors}")
        self.backbone2d = Backbone2D(bc, rng) if cfg.ablation != "3d" else None
        self.backbone3d = Backbone3D(bc, rng) if cfg.ablation != "2d" else None
        fused = bc.widths_2d[-1] + bc.widths_3d[-1]
        self.project = None
        if cfg.ablation == "2d":
            self.project = Conv2d(bc.widths_2d[-1], fused, 1, rng=rng)
        elif cfg.ablation == "3d":
            self.project = Conv2d(bc.widths_3d[-1], fused, 1, rng=rng)
        # ``concat`` is plain concatenation straight into the head, without the CFAM convs or attention
        self.cfam = None
        if cfg.ablation != "concat":
            self.cfam = CFAM(fused, cfg.cfam_out, cfg.cfam_mid, attention=cfg.ablation == "full", rng=rng)
        head_in = fused if self.cfam is None else cfg.cfam_out
        self.head = DetectHead(head_in, cfg.num_classes, cfg.num_anchors, rng=rng)

    # the feature stages are exposed separately so the feature bank can swap the 3D input
    def features_2d(self, key: Tensor) -> Tensor:
        return self.backbone2d(key)

    def features_3d(self, clip: Tensor) -> Tensor:
        return self.backbone3d(clip)

    def from_features(self, f2d: Optional[Tensor], f3d: Optional[Tensor]) -> Tensor:
        mode = self.cfg.ablation
        if mode == "2d":
            fused = self.project(f2d)
        elif mode == "3d":
            fused = self.project(f3d)
        else:
            fused = fuse_concat(f2d, f3d)
        return self.head(fused if self.cfam is None else self.cfam(fused))

    def forward(self, clip, key, feat3d=None) -> Tensor:
        """``clip [N, 3, D, H, W]``, ``key [N, 3, H, W]`` -> raw grid ``[N, k*(5+K), H', W']``.

        ``feat3d`` replaces the live 3D features (feature-bank inference).
        """
        clip = clip if isinstance(clip, Tensor) or clip is None else Tensor(clip)
        key = key if isinstance(key, Tensor) or key is None else Tensor(key)
        f2d = self.features_2d(key) if self.backbone2d is not None else None
        if self.backbone3d is None:
            f3d = None
        elif feat3d is not None:
            f3d = feat3d if isinstance(feat3d, Tensor) else Tensor(feat3d)
        else:
            f3d = self.features_3d(clip)
        return self.from_features(f2d, f3d)

    def predict(self, clip, key, feat3d=None) -> np.ndarray:
        with no_grad():
            return self.forward(clip, key, feat3d).data
