"""Frame- and video-level average precision plus localization/classification diagnostics."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import iou, iou_matrix
from .linking import ActionTube

__all__ = [
    "FrameDet",
    "FrameGT",
    "EvalReport",
    "average_precision",
    "tube_iou",
    "frame_map",
    "video_map",
    "diagnostics",
    "VIDEO_THRESHOLDS",
]

VIDEO_THRESHOLDS = (0.1, 0.2, 0.5, 0.75)


@dataclass
class FrameDet:
    """A scored, class-labelled box in frame ``key`` (any hashable, e.g. ``(video, frame)``)."""

    key: Hashable
    label: int
    score: float
    box: Tuple[float, float, float, float]


@dataclass
class FrameGT:
    key: Hashable
    label: int
    box: Tuple[float, float, float, float]


@dataclass
class EvalReport:
    ap: Dict[int, float]
    iou_thresh: float
    recall: Optional[float] = None
    accuracy: Optional[float] = None
    kind: str = "frame"

    @property
    def mAP(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    def table(self, names: Optional[Sequence[str]] = None) -> str:
        rows = [f"{self.kind}-mAP @ IoU {self.iou_thresh:g}", f"{'class':<16}{'AP':>8}"]
        for c in sorted(self.ap):
            label = names[c] if names else str(c)
            rows.append(f"{label:<16}{self.ap[c]:>8.4f}")
        rows.append(f"{'mean':<16}{self.mAP:>8.4f}")
        if self.recall is not None:
            rows.append(f"{'recall':<16}{self.recall:>8.4f}")
        if self.accuracy is not None:
            rows.append(f"{'cls accuracy':<16}{self.accuracy:>8.4f}")
        return "\n".join(rows)

    def records(self) -> List[str]:
        """Machine-readable ``kind threshold name value`` lines."""
        out = [f"{self.kind} {float(self.iou_thresh)!r} ap_{c} {float(self.ap[c])!r}" for c in sorted(self.ap)]
        out.append(f"{self.kind} {float(self.iou_thresh)!r} mAP {float(self.mAP)!r}")
        if self.recall is not None:
            out.append(f"{self.kind} {float(self.iou_thresh)!r} recall {float(self.recall)!r}")
        if self.accuracy is not None:
            out.append(f"{self.kind} {float(self.iou_thresh)!r} accuracy {float(self.accuracy)!r}")
        return out


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the PR curve of a ranked TP/FP list."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _rank(items, score):
    return sorted(range(len(items)), key=lambda i: (-score(items[i]), i))


def _match(dets, gts_by_key, overlap, thresh):
    """Greedy one-to-one matching in descending score order."""
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts_by_key.items()}
    flags = []
    for d in dets:
        cands = gts_by_key.get(d.key, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if used[d.key][j]:
                continue
            o = overlap(d, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= thresh:
            used[d.key][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def frame_map(dets: Sequence[FrameDet], gts: Sequence[FrameGT], iou_thresh: float = 0.5) -> EvalReport:
    """Per-class VOC-style AP over frame detections; classes without ground truth are skipped."""
    by_class_gt: Dict[int, Dict[Hashable, list]] = defaultdict(lambda: defaultdict(list))
    for g in gts:
        by_class_gt[g.label][g.key].append(g)
    ap = {}
    for c in sorted(by_class_gt):
        cdets = [d for d in dets if d.label == c]
        ranked = [cdets[i] for i in _rank(cdets, lambda d: d.score)]
        flags = _match(ranked, by_class_gt[c], lambda d, g: iou(d.box, g.box), iou_thresh)
        ap[c] = average_precision(flags, sum(len(v) for v in by_class_gt[c].values()))
    return EvalReport(ap, iou_thresh)


def tube_iou(a: ActionTube, b: ActionTube) -> float:
    """Mean per-frame IoU over the union of both tubes' frames (0 where only one is present)."""
    fa = dict(zip(a.frames, a.boxes))
    fb = dict(zip(b.frames, b.boxes))
    frames = set(fa) | set(fb)
    if not frames or not (set(fa) & set(fb)):
        return 0.0
    total = sum(iou(fa[f], fb[f]) for f in frames if f in fa and f in fb)
    return total / len(frames)


def video_map(tubes: Sequence[ActionTube], gt_tubes: Sequence[ActionTube],
              thresholds: Sequence[float] = VIDEO_THRESHOLDS) -> Dict[float, EvalReport]:
    """Tube AP per class at each threshold; a match needs the right label and tube IoU >= threshold."""
    gt_by_class: Dict[int, Dict[Hashable, list]] = defaultdict(lambda: defaultdict(list))
    for g in gt_tubes:
        gt_by_class[g.label][g.video_id].append(g)
    out = {}
    for th in thresholds:
        ap = {}
        for c in sorted(gt_by_class):
            ctubes = [t for t in tubes if t.label == c]
            ranked = [ctubes[i] for i in _rank(ctubes, lambda t: t.score)]
            keyed = [_Keyed(t.video_id, t) for t in ranked]
            flags = _match(keyed, gt_by_class[c], lambda d, g: tube_iou(d.tube, g), th)
            ap[c] = average_precision(flags, sum(len(v) for v in gt_by_class[c].values()))
        out[th] = EvalReport(ap, th, kind="video")
    return out


@dataclass
class _Keyed:
    key: Hashable
    tube: ActionTube


def diagnostics(dets: Sequence[FrameDet], gts: Sequence[FrameGT], iou_thresh: float = 0.5):
    """``(recall, classification accuracy)``.

    A ground truth is localized when any detection in its frame overlaps it
    by at least ``iou_thresh`` regardless of label; it is correctly
    classified when the best-overlapping detection carries its label.
    """
    by_key = defaultdict(list)
    for d in dets:
        by_key[d.key].append(d)
    localized = correct = 0
    for g in gts:
        cands = by_key.get(g.key, [])
        if not cands:
            continue
        ov = iou_matrix([g.box], [d.box for d in cands])[0]
        j = int(np.argmax(ov))
        if ov[j] >= iou_thresh:
            localized += 1
            correct += int(cands[j].label == g.label)
    recall = localized / len(gts) if gts else 0.0
    accuracy = correct / localized if localized else 0.0
    return recall, accuracy
