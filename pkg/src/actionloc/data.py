"""Synthetic motion videos, annotation files, clip sampling and augmentation.

In the synthetic videos a single square moves according to its class
(``left``, ``right``, ``up``, ``down``, ``grow``, ``shrink``). Appearance is
drawn from the same distribution for every class and a left-moving
trajectory is a right-moving one played backwards, so a single frame says
nothing about the class: only motion does.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

__all__ = [
    "Annotation",
    "AnnotatedVideo",
    "ClipSpec",
    "SynthConfig",
    "MOTIONS",
    "synth_generate",
    "flip_label_map",
    "read_manifest",
    "clip_indices",
    "sample_clip",
    "augment",
    "AugmentDraw",
    "save_annotations",
    "load_annotations",
    "save_dataset",
    "load_dataset",
]

# per-frame (dx, dy, dsize) in pixels
MOTIONS: Dict[str, Tuple[int, int, int]] = {
    "left": (-1, 0, 0),
    "right": (1, 0, 0),
    "up": (0, -1, 0),
    "down": (0, 1, 0),
    "grow": (0, 0, 1),
    "shrink": (0, 0, -1),
}


@dataclass
class Annotation:
    box: Tuple[float, float, float, float]
    label: int


@dataclass
class AnnotatedVideo:
    """Frames are stored as ``uint8`` ``[T, 3, H, W]``; :attr:`frames` gives floats in ``[0, 1]``."""

    video_id: str
    pixels: np.ndarray
    annotations: List[List[Annotation]]
    label: Optional[int] = None

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3 or len(self.pixels) < 1:
            raise ValueError(f"expected [T, 3, H, W] frames, got {self.pixels.shape}")
        if len(self.annotations) != len(self.pixels):
            raise ValueError("one annotation list per frame required")
        for frame in self.annotations:
            for a in frame:
                x, y, w, h = a.box
                if x < -1e-9 or y < -1e-9 or x + w > 1 + 1e-9 or y + h > 1 + 1e-9:
                    raise ValueError(f"{self.video_id}: box {a.box} leaves the unit square")

    def __len__(self):
        return len(self.pixels)

    @property
    def frames(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0

    def frame(self, i: int) -> np.ndarray:
        return self.pixels[i].astype(np.float32) / 255.0

    @property
    def size(self) -> Tuple[int, int]:
        return self.pixels.shape[2], self.pixels.shape[3]


@dataclass
class ClipSpec:
    length: int = 8
    rate: int = 1
    # "repeat": clamp indices below 0 to frame 0; "skip": key frames without full history are not used
    pad: str = "repeat"

    def __post_init__(self):
        if self.length < 1 or self.rate < 1:
            raise ValueError("clip length and rate must be positive")
        if self.pad not in ("repeat", "skip"):
            raise ValueError(f"unknown padding {self.pad!r}")

    @property
    def history(self) -> int:
        return (self.length - 1) * self.rate

    def valid_keys(self, num_frames: int) -> range:
        return range(self.history if self.pad == "skip" else 0, num_frames)


@dataclass
class SynthConfig:
    classes: List[str] = field(default_factory=lambda: ["left", "right", "up", "down"])
    train_per_class: int = 100
    test_per_class: int = 30
    frames: int = 40
    image_size: int = 64
    object_size: Tuple[int, int] = (12, 18)
    speed: int = 1
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        unknown = set(self.classes) - set(MOTIONS)
        if unknown:
            raise ValueError(f"unknown motion programs: {sorted(unknown)}")
        lo, hi = self.object_size
        travel = self.speed * (self.frames - 1)
        if lo < 2 or hi < lo:
            raise ValueError(f"bad object size range {self.object_size}")
        if hi + travel > self.image_size:
            raise ValueError(f"objects up to {hi}px moving {travel}px do not fit a {self.image_size}px frame")

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


def _trajectory(kind: str, cfg: SynthConfig, rng: np.random.Generator):
    """Integer (x, y, size) per frame for one video."""
    dx, dy, ds = MOTIONS[kind]
    n, img, v = cfg.frames, cfg.image_size, cfg.speed
    lo, hi = cfg.object_size
    travel = v * (n - 1)
    t = np.arange(n)
    if ds:
        # sizes sweep [s0, s0 + travel] in either direction; centre fixed
        s0 = int(rng.integers(lo, hi + 1))
        size = s0 + v * t if ds > 0 else s0 + travel - v * t
        big = s0 + travel
        cx = rng.integers(big // 2, img - (big - big // 2) + 1)
        cy = rng.integers(big // 2, img - (big - big // 2) + 1)
        x = cx - size // 2
        y = cy - size // 2
        return x, y, size
    s = int(rng.integers(lo, hi + 1))
    size = np.full(n, s)
    free = img - s
    # moving axis: the whole path stays inside and a reversed left path is a
    # right path. The static axis is drawn from the moving axis' pooled
    # marginal, so every direction shares one per-frame position distribution.
    start = rng.integers(0, free - travel + 1)
    moving = start + v * t if (dx > 0 or dy > 0) else start + travel - v * t
    static = np.full(n, rng.integers(0, free - travel + 1) + v * rng.integers(0, n))
    if dx:
        return moving, static, size
    return static, moving, size


def _render(x, y, size, color, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n, img = len(x), cfg.image_size
    frames = np.empty((n, 3, img, img), dtype=np.float64)
    base = 0.15
    for t in range(n):
        f = np.full((3, img, img), base)
        f[:, y[t]:y[t] + size[t], x[t]:x[t] + size[t]] = color[:, None, None]
        if cfg.noise:
            f += rng.normal(0.0, cfg.noise, f.shape)
        frames[t] = f
    return np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8)


MIRRORED = {"left": "right", "right": "left"}


def flip_label_map(classes: Sequence[str]) -> Dict[int, int]:
    """Class index pairs swapped by a horizontal flip (left <-> right motion)."""
    index = {name: i for i, name in enumerate(classes)}
    return {index[a]: index[b] for a, b in MIRRORED.items() if a in index and b in index}


def synth_generate(cfg: SynthConfig) -> Dict[str, List[AnnotatedVideo]]:
    """Deterministic ``{"train": [...], "test": [...]}`` datasets."""
    rng = np.random.default_rng(cfg.seed)
    out = {"train": [], "test": []}
    img = float(cfg.image_size)
    for split, count in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        for n in range(count):
            for label, kind in enumerate(cfg.classes):
                x, y, size = _trajectory(kind, cfg, rng)
                color = rng.uniform(0.55, 1.0, 3)
                pixels = _render(x, y, size, color, cfg, rng)
                ann = [[Annotation((x[t] / img, y[t] / img, size[t] / img, size[t] / img), label)]
                       for t in range(cfg.frames)]
                out[split].append(AnnotatedVideo(f"{split}_{kind}_{n:04d}", pixels, ann, label))
    return out


def clip_indices(key: int, spec: ClipSpec) -> List[int]:
    """Frame indices of the clip ending at ``key``, oldest first; negatives clamp to 0."""
    return [max(key - (spec.length - 1 - i) * spec.rate, 0) for i in range(spec.length)]


def sample_clip(video: AnnotatedVideo, key: int, spec: ClipSpec):
    """``(clip [3, D, H, W], key frame [3, H, W])`` as float32 arrays; the key frame is the clip's last frame."""
    if not 0 <= key < len(video):
        raise IndexError(f"key frame {key} outside video of {len(video)} frames")
    idx = clip_indices(key, spec)
    clip = video.pixels[idx].astype(np.float32) / 255.0
    clip = np.ascontiguousarray(clip.transpose(1, 0, 2, 3))
    return clip, clip[:, -1].copy()


@dataclass
class AugmentDraw:
    flip: bool = False
    scale: float = 1.0
    offset: Tuple[float, float] = (0.0, 0.0)

    @classmethod
    def sample(cls, rng: np.random.Generator, size: int, scale_range=(0.8, 1.2)):
        flip = bool(rng.random() < 0.5)
        s = float(rng.uniform(*scale_range))
        span = (s - 1.0) * size
        lo, hi = min(0.0, span), max(0.0, span)
        return cls(flip, s, (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))))


def augment(clip: np.ndarray, key: np.ndarray, boxes: Sequence, rng: Optional[np.random.Generator] = None,
            draw: Optional[AugmentDraw] = None, min_keep: float = 0.3, flip_labels: Optional[Dict[int, int]] = None):
    """Apply one random flip + scale + crop to every frame of the clip and to the key frame.

    ``boxes`` is a list of ``(box, label)``. Returns transformed
    ``(clip, key, boxes)``; boxes keeping less than ``min_keep`` of their
    area inside the frame are dropped. ``flip_labels`` relabels boxes under a
    horizontal flip, for classes that are mirror images of each other.
    """
    c, d, h, w = clip.shape
    if draw is None:
        draw = AugmentDraw.sample(rng, w)
    s, (ox, oy) = draw.scale, draw.offset
    identity = s == 1.0 and ox == 0.0 and oy == 0.0
    if not identity:
        m = np.array([[s, 0, 0.5 * (s - 1) - ox], [0, s, 0.5 * (s - 1) - oy]], dtype=np.float64)

        def warp(img):
            return cv2.warpAffine(np.ascontiguousarray(img.transpose(1, 2, 0)), m, (w, h),
                                  flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT,
                                  borderValue=0).reshape(h, w, c).transpose(2, 0, 1)

        clip = np.stack([warp(clip[:, t]) for t in range(d)], axis=1)
        key = warp(key)
    if draw.flip:
        clip = clip[..., ::-1]
        key = key[..., ::-1]
    clip = np.ascontiguousarray(clip)
    key = np.ascontiguousarray(key)

    out = []
    for box, label in boxes:
        x, y, bw, bh = box
        nx, ny, nw, nh = s * x - ox / w, s * y - oy / h, s * bw, s * bh
        x1, y1 = max(nx, 0.0), max(ny, 0.0)
        x2, y2 = min(nx + nw, 1.0), min(ny + nh, 1.0)
        if x2 <= x1 or y2 <= y1 or (x2 - x1) * (y2 - y1) < min_keep * nw * nh:
            continue
        nb = (x1, y1, x2 - x1, y2 - y1)
        if draw.flip:
            nb = (1.0 - nb[0] - nb[2], nb[1], nb[2], nb[3])
            if flip_labels:
                label = flip_labels.get(label, label)
        out.append((nb, label))
    return clip, key, out


def save_annotations(video: AnnotatedVideo, path) -> None:
    """One ``frame_index class_id x y w h`` line per box."""
    lines = []
    for t, frame in enumerate(video.annotations):
        for a in frame:
            lines.append(f"{t} {a.label} " + " ".join(repr(float(v)) for v in a.box))
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_annotations(path, num_frames: Optional[int] = None) -> List[List[Annotation]]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{n}: expected 'frame class x y w h', got {line!r}")
        try:
            t, c = int(parts[0]), int(parts[1])
            box = tuple(float(v) for v in parts[2:])
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
        rows.append((t, Annotation(box, c)))
    total = num_frames if num_frames is not None else (max((t for t, _ in rows), default=-1) + 1)
    out: List[List[Annotation]] = [[] for _ in range(total)]
    for t, a in rows:
        if t >= total:
            raise ValueError(f"{path}: frame {t} beyond the video's {total} frames")
        out[t].append(a)
    return out


MANIFEST_HEADER = "# video_id split label frames"


def save_dataset(splits: Dict[str, List[AnnotatedVideo]], root) -> None:
    """``videos/<id>/NNNNN.png`` frames, ``annotations/<id>.txt`` and ``manifest.txt``."""
    root = Path(root)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for split, videos in splits.items():
        for v in videos:
            vdir = root / "videos" / v.video_id
            vdir.mkdir(parents=True, exist_ok=True)
            for t in range(len(v)):
                cv2.imwrite(str(vdir / f"{t:05d}.png"), v.pixels[t].transpose(1, 2, 0)[..., ::-1])
            save_annotations(v, root / "annotations" / f"{v.video_id}.txt")
            lines.append(f"{v.video_id} {split} {-1 if v.label is None else v.label} {len(v)}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path) -> List[Tuple[str, str, int, int]]:
    """``(video_id, split, label, frames)`` rows; label -1 means unlabelled."""
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if len(parts) != 4:
                raise ValueError("wrong field count")
            rows.append((parts[0], parts[1], int(parts[2]), int(parts[3])))
        except ValueError:
            raise ValueError(f"{path}:{n}: expected 'video_id split label frames', got {line!r}") from None
    return rows


def load_dataset(root, splits: Optional[Sequence[str]] = None) -> Dict[str, List[AnnotatedVideo]]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    out: Dict[str, List[AnnotatedVideo]] = {}
    for vid, split, label, count in read_manifest(manifest):
        if splits is not None and split not in splits:
            continue
        frames = []
        for t in range(count):
            img = cv2.imread(str(root / "videos" / vid / f"{t:05d}.png"), cv2.IMREAD_COLOR)
            if img is None:
                raise FileNotFoundError(f"missing frame {t} of {vid}")
            frames.append(img[..., ::-1].transpose(2, 0, 1))
        ann = load_annotations(root / "annotations" / f"{vid}.txt", count)
        out.setdefault(split, []).append(
            AnnotatedVideo(vid, np.ascontiguousarray(np.stack(frames)), ann, None if label < 0 else label))
    return out
