"""Run a trained detector over videos and score the results."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import AnnotatedVideo, ClipSpec, sample_clip
from .head import Detection, decode_arrays
from .linking import ActionTube, LinkConfig, viterbi_link
from .metrics import VIDEO_THRESHOLDS, EvalReport, FrameDet, FrameGT, diagnostics, frame_map, video_map
from .model import ActionDetector
from .postprocess import NmsConfig, postprocess_frame

__all__ = ["VideoDetections", "detect_video", "frame_records", "gt_records", "gt_tubes", "link_video",
           "evaluate", "save_detections", "load_detections"]


@dataclass
class VideoDetections:
    """Per-frame, per-class detections kept after filtering and NMS."""

    video_id: str
    frames: List[Dict[int, List[Detection]]]
    non_causal: bool = False


def detect_video(model: ActionDetector, video: AnnotatedVideo, spec: ClipSpec, nms: NmsConfig = NmsConfig(),
                 batch: int = 32, bank=None) -> VideoDetections:
    """Detections for every key frame; ``bank`` (a :class:`FeatureBank`) swaps in averaged 3D features."""
    model.eval()
    k = model.cfg.num_classes
    frames: List[Dict[int, List[Detection]]] = []
    n = len(video)
    for s in range(0, n, batch):
        idx = list(range(s, min(s + batch, n)))
        pairs = [sample_clip(video, t, spec) for t in idx]
        clips = np.stack([p[0] for p in pairs])
        keys = np.stack([p[1] for p in pairs])
        feat3d = None
        if bank is not None:
            feat3d = np.stack([bank.query(t).data.data for t in idx])
        raw = model.predict(clips, keys, feat3d)
        boxes, conf, probs = decode_arrays(raw, model.anchors, model.cfg.pose_classes)
        for j, t in enumerate(idx):
            live = np.argwhere(conf[j] > nms.conf_thresh)
            dets = [Detection(t, tuple(float(v) for v in boxes[j][tuple(p)]), float(conf[j][tuple(p)]),
                              probs[j][tuple(p)].copy(), video.video_id) for p in live]
            frames.append(postprocess_frame(dets, k, nms))
    return VideoDetections(video.video_id, frames, non_causal=bank is not None)


def frame_records(vd: VideoDetections) -> List[FrameDet]:
    out = []
    for t, per_class in enumerate(vd.frames):
        for c, dets in per_class.items():
            for d in dets:
                out.append(FrameDet((vd.video_id, t), c, d.score(c), d.box))
    return out


def top_class_records(vd: VideoDetections) -> List[FrameDet]:
    """One record per distinct kept box, labelled with its most probable class."""
    out = []
    for t, per_class in enumerate(vd.frames):
        seen = set()
        for dets in per_class.values():
            for d in dets:
                if id(d) in seen:
                    continue
                seen.add(id(d))
                c = int(np.argmax(d.class_scores))
                out.append(FrameDet((vd.video_id, t), c, d.score(c), d.box))
    return out


def gt_records(video: AnnotatedVideo) -> List[FrameGT]:
    return [FrameGT((video.video_id, t), a.label, a.box) for t, f in enumerate(video.annotations) for a in f]


def gt_tubes(video: AnnotatedVideo) -> List[ActionTube]:
    """Ground-truth tubes, assuming one actor per frame and a single label per video."""
    tubes: Dict[int, ActionTube] = {}
    for t, f in enumerate(video.annotations):
        for a in f:
            tb = tubes.setdefault(a.label, ActionTube(a.label, video_id=video.video_id))
            tb.frames.append(t)
            tb.boxes.append(tuple(a.box))
            tb.scores.append(1.0)
    return list(tubes.values())


def link_video(vd: VideoDetections, num_classes: int, cfg: LinkConfig = LinkConfig()) -> List[ActionTube]:
    tubes = []
    for c in range(num_classes):
        tubes.extend(viterbi_link([f.get(c, []) for f in vd.frames], c, cfg, video_id=vd.video_id))
    return tubes


def evaluate(model: ActionDetector, videos: Sequence[AnnotatedVideo], spec: ClipSpec,
             nms: NmsConfig = NmsConfig(), link_cfg: LinkConfig = LinkConfig(), iou_thresh: float = 0.5,
             video_thresholds=VIDEO_THRESHOLDS, banks=None):
    """Frame-mAP report (with recall/accuracy diagnostics), video-mAP reports and the linked tubes."""
    dets, top, gts, tubes, gtt = [], [], [], [], []
    for v in videos:
        vd = detect_video(model, v, spec, nms, bank=None if banks is None else banks[v.video_id])
        dets += frame_records(vd)
        top += top_class_records(vd)
        gts += gt_records(v)
        tubes += link_video(vd, model.cfg.num_classes, link_cfg)
        gtt += gt_tubes(v)
    report = frame_map(dets, gts, iou_thresh)
    report.recall, report.accuracy = diagnostics(top, gts, iou_thresh)
    return report, video_map(tubes, gtt, video_thresholds), tubes


DET_HEADER = "# video_id frame class score x y w h"


def save_detections(vds: Sequence[VideoDetections], path) -> None:
    lines = [DET_HEADER]
    for vd in vds:
        for r in frame_records(vd):
            x, y, w, h = r.box
            lines.append(f"{vd.video_id} {r.key[1]} {r.label} {float(r.score)!r} {float(x)!r} {float(y)!r} {float(w)!r} {float(h)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_detections(path) -> List[FrameDet]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{n}: expected 8 fields 'video_id frame class score x y w h'")
            try:
                rec = FrameDet((parts[0], int(parts[1])), int(parts[2]), float(parts[3]),
                               tuple(float(v) for v in parts[4:8]))
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: {exc}") from None
            out.append(rec)
    return out
