"""Long-term feature bank: 3D features of non-overlapping clips, averaged around a key frame.

Using the bank at inference looks at future frames, so any output produced
with it is non-causal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .backbones import Backbone3D, ThreeDFeature
from .data import AnnotatedVideo
from .tensor import Tensor, no_grad

__all__ = ["FeatureBank", "build_bank", "query", "save_bank", "load_bank"]


@dataclass
class FeatureBank:
    video_id: str
    clip_len: int
    features: Dict[int, np.ndarray] = field(default_factory=dict)
    window: int = 8

    @property
    def starts(self) -> List[int]:
        return sorted(self.features)

    @property
    def shape(self) -> Tuple[int, ...]:
        return next(iter(self.features.values())).shape

    def __len__(self):
        return len(self.features)

    def selection(self, key_frame: int, window: int) -> List[int]:
        """Clip start indices averaged for ``key_frame``.

        The clip holding the key frame (the last clip for trailing frames),
        ``(window - 1) // 2`` clips before it and the rest after, cut at the
        video's ends.
        """
        starts = self.starts
        own = min(key_frame // self.clip_len, len(starts) - 1)
        before = (window - 1) // 2
        after = window - 1 - before
        lo, hi = max(own - before, 0), min(own + after, len(starts) - 1)
        return starts[lo:hi + 1]

    def query(self, key_frame: int, window: int = None) -> ThreeDFeature:
        if not self.features:
            raise ValueError("empty feature bank")
        sel = self.selection(key_frame, window or self.window)
        mean = np.mean([self.features[s] for s in sel], axis=0)
        return ThreeDFeature(Tensor(mean, dtype=mean.dtype), self.video_id, key_frame)


def build_bank(video: AnnotatedVideo, backbone3d: Backbone3D, clip_len: int = 8, batch: int = 16,
               window: int = 8) -> FeatureBank:
    """One feature per full ``clip_len`` window; trailing frames are dropped."""
    if len(video) < clip_len:
        raise ValueError(f"video {video.video_id} has {len(video)} frames, fewer than one {clip_len}-frame clip")
    if backbone3d.clip_len != clip_len:
        raise ValueError(f"backbone expects {backbone3d.clip_len}-frame clips, bank uses {clip_len}")
    was_training = backbone3d.training
    backbone3d.eval()
    starts = list(range(0, len(video) - clip_len + 1, clip_len))
    bank = FeatureBank(video.video_id, clip_len, window=window)
    frames = video.frames
    try:
        with no_grad():
            for i in range(0, len(starts), batch):
                group = starts[i:i + batch]
                clips = np.stack([frames[s:s + clip_len].transpose(1, 0, 2, 3) for s in group])
                feats = backbone3d(Tensor(clips)).data
                for s, f in zip(group, feats):
                    bank.features[s] = f.copy()
    finally:
        backbone3d.train(was_training)
    return bank


def query(bank: FeatureBank, key_frame_index: int, window: int = 8) -> ThreeDFeature:
    return bank.query(key_frame_index, window)


def save_bank(bank: FeatureBank, directory) -> None:
    """``index.txt`` (header: video id, clip length, feature shape; then one start per line) + ``<start>.npy``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shape = " ".join(str(n) for n in bank.shape)
    lines = [f"video_id {bank.video_id}", f"clip_len {bank.clip_len}", f"shape {shape}", f"window {bank.window}"]
    for s in bank.starts:
        np.save(d / f"{s:06d}.npy", bank.features[s])
        lines.append(str(s))
    (d / "index.txt").write_text("\n".join(lines) + "\n")


def load_bank(directory) -> FeatureBank:
    d = Path(directory)
    lines = (d / "index.txt").read_text().splitlines()
    head = dict(line.split(" ", 1) for line in lines[:4])
    shape = tuple(int(v) for v in head["shape"].split())
    bank = FeatureBank(head["video_id"], int(head["clip_len"]), window=int(head["window"]))
    for line in lines[4:]:
        if line.strip():
            s = int(line)
            f = np.load(d / f"{s:06d}.npy")
            if f.shape != shape:
                raise ValueError(f"{d}: feature {s} has shape {f.shape}, index says {shape}")
            bank.features[s] = f
    return bank
