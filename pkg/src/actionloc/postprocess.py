"""Confidence filtering and per-class greedy non-maximum suppression."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .boxes import iou_matrix
from .head import Detection

__all__ = ["NmsConfig", "filter_confidence", "nms", "nms_indices", "postprocess_frame"]


@dataclass
class NmsConfig:
    conf_thresh: float = 0.25
    nms_thresh: float = 0.4

    def __post_init__(self):
        for v in (self.conf_thresh, self.nms_thresh):
            if not 0 <= v <= 1:
                raise ValueError("thresholds must lie in [0, 1]")

    @classmethod
    def multi_label(cls):
        return cls(0.25, 0.5)


def filter_confidence(dets: Sequence[Detection], tau: float = 0.25) -> List[Detection]:
    return [d for d in dets if d.confidence > tau]


def nms_indices(boxes, scores, thresh: float) -> List[int]:
    """Greedy suppression; ties in score go to the earlier index."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return []
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    overlap = iou_matrix(boxes, boxes)
    alive = np.ones(len(scores), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= overlap[i] <= thresh
        alive[i] = False
    return keep


def nms(dets: Sequence[Detection], c: int, tau_nms: float = 0.4) -> List[Detection]:
    """Keep the highest ``confidence * p(c)`` box, drop others overlapping it by more than ``tau_nms``, repeat."""
    if not dets:
        return []
    keep = nms_indices([d.box for d in dets], [d.score(c) for d in dets], tau_nms)
    return [dets[i] for i in keep]


def postprocess_frame(dets: Sequence[Detection], num_classes: int, cfg: NmsConfig = NmsConfig()) -> Dict[int, List[Detection]]:
    """Confidence filter, then NMS separately for every class."""
    kept = filter_confidence(dets, cfg.conf_thresh)
    return {c: nms(kept, c, cfg.nms_thresh) for c in range(num_classes)}
