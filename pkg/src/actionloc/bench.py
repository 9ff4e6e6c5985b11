"""Throughput measurement and per-branch activation heatmaps."""
from __future__ import annotations

import dataclasses
import time
from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np

from .data import AnnotatedVideo, ClipSpec, sample_clip
from .model import ActionDetector, ModelConfig
from .tensor import Tensor, no_grad

__all__ = ["benchmark", "time_clips", "activation_magnitude", "overlay", "activation_heatmaps"]


def time_clips(model: ActionDetector, clips: int = 16, batch: int = 1, warmup: int = 1, seed: int = 0) -> dict:
    """Run ``clips`` random clips through ``model`` and time them.

    fps counts every frame of every clip: ``clip_len * clips / seconds``.
    """
    bc = model.cfg.backbone
    rng = np.random.default_rng(seed)
    size = bc.image_size
    data = rng.random((batch, 3, bc.clip_len, size, size)).astype(np.float32)
    key = np.ascontiguousarray(data[:, :, -1])
    model.eval()
    for _ in range(warmup):
        model.predict(data, key)
    done = 0
    start = time.perf_counter()
    while done < clips:
        model.predict(data, key)
        done += batch
    seconds = time.perf_counter() - start
    return {
        "clip_len": bc.clip_len,
        "clips": done,
        "frames": done * bc.clip_len,
        "seconds": seconds,
        "fps": done * bc.clip_len / seconds,
        "latency": seconds / done,
    }


def benchmark(cfg, base: Optional[ModelConfig] = None, clip_lens: Sequence[int] = (8, 16), clips: int = 16,
              batch: int = 1, downsample: int = 1) -> List[dict]:
    """fps and per-clip latency for each clip length.

    The 3D branch's last temporal kernel depends on the clip length, so each
    length gets its own freshly initialised model built from ``base`` (or
    from ``cfg``); timings do not depend on the weights.
    """
    base = base or cfg.model_config()
    out = []
    for d in clip_lens:
        mc = dataclasses.replace(base, backbone=dataclasses.replace(base.backbone, clip_len=d))
        row = time_clips(ActionDetector(mc), clips=clips, batch=batch)
        row["downsample"] = downsample
        out.append(row)
    return out


def activation_magnitude(feature: np.ndarray, size) -> np.ndarray:
    """Channel-mean absolute activation ``[C, h, w]`` -> ``[H, W]`` in [0, 1], bilinearly upsampled."""
    m = np.abs(np.asarray(feature, dtype=np.float32)).mean(axis=0)
    m = cv2.resize(m, (size[1], size[0]), interpolation=cv2.INTER_LINEAR)
    lo, hi = float(m.min()), float(m.max())
    return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)


def overlay(frame: np.ndarray, heat: np.ndarray, weight: float = 0.5) -> np.ndarray:
    """Blend a [0, 1] heatmap over an RGB ``[3, H, W]`` float frame; returns BGR uint8 ``[H, W, 3]``."""
    rgb = np.clip(np.asarray(frame).transpose(1, 2, 0) * 255, 0, 255).astype(np.uint8)
    bgr = cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)
    colored = cv2.applyColorMap((heat * 255).astype(np.uint8), cv2.COLORMAP_JET)
    return cv2.addWeighted(bgr, 1.0 - weight, colored, weight, 0.0)


def activation_heatmaps(model: ActionDetector, video: AnnotatedVideo, frame: int, spec: ClipSpec,
                        out_dir, scale: int = 4) -> List[Path]:
    """Write ``heatmap_2d.png`` / ``heatmap_3d.png`` for the branches the model has."""
    if not 0 <= frame < len(video):
        raise ValueError(f"frame {frame} outside video {video.video_id} of {len(video)} frames")
    clip, key = sample_clip(video, frame, spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    h, w = key.shape[1:]
    paths = []
    with no_grad():
        branches = []
        if model.backbone2d is not None:
            branches.append(("2d", model.features_2d(Tensor(key[None])).data[0]))
        if model.backbone3d is not None:
            branches.append(("3d", model.features_3d(Tensor(clip[None])).data[0]))
    for name, feat in branches:
        img = overlay(key, activation_magnitude(feat, (h, w)))
        img = cv2.resize(img, (w * scale, h * scale), interpolation=cv2.INTER_NEAREST)
        path = out / f"heatmap_{name}.png"
        cv2.imwrite(str(path), img)
        paths.append(path)
    return paths
