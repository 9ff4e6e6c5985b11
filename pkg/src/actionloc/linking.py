"""Link per-frame detections of one class into action tubes.

Consecutive detections are scored by their class scores, the product of
those scores and their overlap, gated to zero when they do not overlap. The
best path through a run of frames is found by Viterbi; its boxes are removed
and the search repeats until every detection belongs to a tube. Paths are
cut wherever the gate is closed, so tubes never join non-overlapping boxes
and never bridge an empty frame.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .boxes import iou_matrix
from .head import Detection

__all__ = ["LinkConfig", "ActionTube", "link_score", "viterbi_best_path", "viterbi_link", "path_score",
           "save_tubes", "load_tubes"]


@dataclass
class LinkConfig:
    alpha: float = 1.0
    beta: float = 0.5


@dataclass
class ActionTube:
    label: int
    frames: List[int] = field(default_factory=list)
    boxes: List[Tuple[float, float, float, float]] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)
    video_id: Optional[str] = None

    @property
    def score(self) -> float:
        return float(np.mean(self.scores)) if self.scores else 0.0

    def __len__(self):
        return len(self.frames)

    def box_at(self, frame: int):
        try:
            return self.boxes[self.frames.index(frame)]
        except ValueError:
            return None

    def is_contiguous(self) -> bool:
        return all(b - a == 1 for a, b in zip(self.frames, self.frames[1:]))


def _pair_scores(s0, s1, ov, cfg: LinkConfig):
    gate = (ov > 0).astype(np.float64)
    return gate * (s0[:, None] + s1[None, :] + cfg.alpha * s0[:, None] * s1[None, :] + cfg.beta * ov)


def link_score(r_t: Detection, r_t1: Detection, c: int, cfg: LinkConfig = LinkConfig()) -> float:
    ov = iou_matrix([r_t.box], [r_t1.box])
    return float(_pair_scores(np.array([r_t.score(c)]), np.array([r_t1.score(c)]), ov, cfg)[0, 0])


def viterbi_best_path(scores: Sequence[np.ndarray], boxes: Sequence[np.ndarray], cfg: LinkConfig):
    """Best path through consecutive non-empty frames.

    ``scores[t]`` is ``[n_t]``, ``boxes[t]`` is ``[n_t, 4]``. Returns the
    chosen index per frame and the total link score. Ties go to the lower
    index.
    """
    acc = np.zeros(len(scores[0]))
    back = []
    for t in range(1, len(scores)):
        pair = _pair_scores(scores[t - 1], scores[t], iou_matrix(boxes[t - 1], boxes[t]), cfg)
        total = acc[:, None] + pair
        arg = np.argmax(total, axis=0)
        back.append(arg)
        acc = total[arg, np.arange(total.shape[1])]
    j = int(np.argmax(acc))
    best = float(acc[j])
    path = [j]
    for arg in reversed(back):
        j = int(arg[j])
        path.append(j)
    return path[::-1], best


def path_score(path, scores, boxes, cfg: LinkConfig) -> float:
    total = 0.0
    for t in range(1, len(path)):
        pair = _pair_scores(scores[t - 1][[path[t - 1]]], scores[t][[path[t]]],
                            iou_matrix(boxes[t - 1][[path[t - 1]]], boxes[t][[path[t]]]), cfg)
        total += float(pair[0, 0])
    return total


def brute_force_best_path(scores, boxes, cfg: LinkConfig):
    """Exhaustive search over every choice of one box per frame."""
    best, best_path = -np.inf, None
    for path in itertools.product(*[range(len(s)) for s in scores]):
        v = path_score(path, scores, boxes, cfg)
        if v > best:
            best, best_path = v, list(path)
    return best_path, best


def viterbi_link(frame_dets: Sequence[Sequence[Detection]], c: int, cfg: LinkConfig = LinkConfig(),
                 first_frame: int = 0, video_id: Optional[str] = None) -> List[ActionTube]:
    """Tubes for class ``c``; ``frame_dets[t]`` holds the detections of frame ``first_frame + t``."""
    remaining = [list(d) for d in frame_dets]
    tubes: List[ActionTube] = []

    def runs():
        t, n = 0, len(remaining)
        while t < n:
            if not remaining[t]:
                t += 1
                continue
            start = t
            while t < n and remaining[t]:
                t += 1
            yield start, t

    while any(remaining):
        start, stop = next(runs())
        span = remaining[start:stop]
        scores = [np.array([d.score(c) for d in dets]) for dets in span]
        boxes = [np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4) for dets in span]
        path, _ = viterbi_best_path(scores, boxes, cfg)
        chosen = [span[t][j] for t, j in enumerate(path)]
        piece = ActionTube(c, video_id=video_id)
        for t, det in enumerate(chosen):
            if t > 0 and iou_matrix([chosen[t - 1].box], [det.box])[0, 0] <= 0:
                tubes.append(piece)
                piece = ActionTube(c, video_id=video_id)
            piece.frames.append(first_frame + start + t)
            piece.boxes.append(tuple(det.box))
            piece.scores.append(det.score(c))
        tubes.append(piece)
        for t, j in enumerate(path):
            del remaining[start + t][j]
    tubes.sort(key=lambda tb: (tb.frames[0], -tb.score))
    return tubes


TUBE_HEADER = "# video_id class frame x y w h score"


def save_tubes(tubes: Sequence[ActionTube], path) -> None:
    """One ``video_id class frame x y w h score`` line per tube frame; tubes are separated by a blank line."""
    blocks = [TUBE_HEADER]
    for tb in tubes:
        blocks.append("\n".join(f"{tb.video_id} {tb.label} {f} {float(b[0])!r} {float(b[1])!r} {float(b[2])!r} {float(b[3])!r} {float(s)!r}"
                                for f, b, s in zip(tb.frames, tb.boxes, tb.scores)))
    with open(path, "w") as fh:
        fh.write("\n\n".join(blocks) + "\n")


def load_tubes(path) -> List[ActionTube]:
    tubes: List[ActionTube] = []
    current = None
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if line.startswith("#"):
                continue
            if not line:
                current = None
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
            try:
                vid, label, frame = parts[0], int(parts[1]), int(parts[2])
                box = tuple(float(v) for v in parts[3:7])
                score = float(parts[7])
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: {exc}") from None
            if current is None:
                current = ActionTube(label, video_id=vid)
                tubes.append(current)
            elif current.video_id != vid or current.label != label or frame != current.frames[-1] + 1:
                raise ValueError(f"{path}:{n}: record does not continue the tube above it")
            current.frames.append(frame)
            current.boxes.append(box)
            current.scores.append(score)
    return tubes
