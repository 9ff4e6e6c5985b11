"""Anchor priors, the 1x1 prediction layer, box decoding and target assignment.

Channel layout of the raw grid: for each anchor slot ``a`` the channels
``a*(5+K) .. a*(5+K)+5+K`` hold ``tx, ty, tw, th, tconf`` followed by the
``K`` class logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .boxes import clip_unit, wh_iou
from .layers import Conv2d, Module
from .tensor import ShapeError, Tensor

__all__ = [
    "AnchorSet",
    "Detection",
    "Targets",
    "DetectHead",
    "kmeans_anchors",
    "kmeans_objective",
    "decode_arrays",
    "decode",
    "build_targets",
    "targets_to_raw",
    "save_anchors",
    "load_anchors",
    "class_probabilities",
]


@dataclass
class AnchorSet:
    """``k`` (width, height) priors in grid-cell units."""

    wh: np.ndarray

    def __post_init__(self):
        self.wh = np.asarray(self.wh, dtype=np.float64).reshape(-1, 2)
        if np.any(self.wh <= 0):
            raise ValueError("anchor sizes must be positive")

    def __len__(self):
        return len(self.wh)


@dataclass
class Detection:
    frame: int
    box: Tuple[float, float, float, float]
    confidence: float
    class_scores: np.ndarray
    video_id: Optional[str] = None

    def score(self, c: int) -> float:
        """Ranking score for class ``c``: confidence times class probability."""
        return float(self.confidence * self.class_scores[c])


def kmeans_objective(wh, centroids) -> float:
    """Mean ``1 - IoU`` of each box to its closest co-centred centroid."""
    return float(np.mean(1.0 - wh_iou(wh, centroids).max(axis=1)))


def _cluster_cost(c, members):
    if np.any(c <= 0):
        return np.inf
    return float(np.mean(1.0 - wh_iou(members, c[None, :])[:, 0]))


def kmeans_anchors(boxes, k: int = 5, seed: int = 0, max_iter: int = 100, init=None,
                   tol: float = 1e-10) -> AnchorSet:
    """Lloyd clustering of box sizes under the ``1 - IoU`` distance.

    Each update step moves a centroid to the best of (mean, median, a
    Nelder-Mead refinement) of its members, and only when that strictly
    lowers the cluster cost by more than ``tol``; the objective therefore
    never increases and a converged set is a fixed point.
    """
    wh = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if np.any(wh <= 0):
        raise ValueError("box sizes must be positive")
    distinct = np.unique(wh, axis=0)
    if len(distinct) < k and init is None:
        if len(distinct) == 1 and k == 1:
            return AnchorSet(distinct.copy())
        raise ValueError(f"need at least {k} distinct boxes, got {len(distinct)}")
    if init is not None:
        cent = np.array(init.wh if isinstance(init, AnchorSet) else init, dtype=np.float64).reshape(-1, 2)
    else:
        rng = np.random.default_rng(seed)
        cent = distinct[np.sort(rng.choice(len(distinct), size=k, replace=False))].copy()

    for _ in range(max_iter):
        assign = np.argmax(wh_iou(wh, cent), axis=1)
        moved = False
        for j in range(len(cent)):
            members = wh[assign == j]
            if len(members) == 0:
                continue
            current = _cluster_cost(cent[j], members)
            cands = [members.mean(axis=0), np.median(members, axis=0)]
            start = min(cands + [cent[j]], key=lambda c: _cluster_cost(c, members))
            res = minimize(_cluster_cost, start, args=(members,), method="Nelder-Mead",
                           options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 400})
            cands.append(res.x)
            best = min(cands, key=lambda c: _cluster_cost(c, members))
            if _cluster_cost(best, members) < current - tol:
                cent[j] = best
                moved = True
        if not moved:
            break
    return AnchorSet(cent)


def save_anchors(anchors: AnchorSet, path) -> None:
    lines = [f"{float(w)!r} {float(h)!r}" for w, h in anchors.wh]
    Path(path).write_text("\n".join(lines) + "\n")


def load_anchors(path) -> AnchorSet:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ValueError(f"{path}:{n}: expected 'w h', got {line!r}") from None
    return AnchorSet(np.array(rows))


class DetectHead(Module):
    """1x1 convolution to ``k * (NumCls + 5)`` channels, no activation."""

    INIT_SCALE = 0.1
    CONF_PRIOR = -3.0

    def __init__(self, in_channels: int, num_classes: int, num_anchors: int = 5, rng=None):
        rng = np.random.default_rng(3) if rng is None else rng
        self.num_classes = num_classes
        self.num_anchors = num_anchors
        self.conv = Conv2d(in_channels, num_anchors * (num_classes + 5), 1, rng=rng)
        # small initial outputs, and a low confidence prior so the many empty
        # slots do not swamp the first updates
        self.conv.weight.data *= self.INIT_SCALE
        bias = self.conv.bias.data.reshape(num_anchors, num_classes + 5)
        bias[:, 4] = self.CONF_PRIOR

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def class_probabilities(logits: np.ndarray, pose_classes: Optional[int] = None) -> np.ndarray:
    """Softmax over all classes, or softmax over the first ``pose_classes`` and sigmoids over the rest."""
    if pose_classes is None:
        return _softmax(logits)
    return np.concatenate([_softmax(logits[..., :pose_classes]), _sigmoid(logits[..., pose_classes:])], axis=-1)


def decode_arrays(raw, anchors: AnchorSet, pose_classes: Optional[int] = None):
    """Vectorized decoding.

    ``raw``: ``[N, k*(5+K), H', W']`` (or without the batch axis). Returns
    ``boxes [N, k, H', W', 4]`` (top-left, clipped), ``conf [N, k, H', W']``
    and ``probs [N, k, H', W', K]``.
    """
    raw = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float64)
    single = raw.ndim == 3
    if single:
        raw = raw[None]
    n, ch, gh, gw = raw.shape
    k = len(anchors)
    if ch % k or ch // k < 6:
        raise ShapeError(f"{ch} channels cannot hold {k} anchor slots")
    r = raw.reshape(n, k, ch // k, gh, gw)
    cx = np.arange(gw)[None, None, None, :]
    cy = np.arange(gh)[None, None, :, None]
    aw = anchors.wh[:, 0][None, :, None, None]
    ah = anchors.wh[:, 1][None, :, None, None]
    bx = (_sigmoid(r[:, :, 0]) + cx) / gw
    by = (_sigmoid(r[:, :, 1]) + cy) / gh
    with np.errstate(over="ignore"):
        bw = aw * np.exp(r[:, :, 2]) / gw
        bh = ah * np.exp(r[:, :, 3]) / gh
    x1 = np.clip(bx - bw / 2, 0.0, 1.0)
    y1 = np.clip(by - bh / 2, 0.0, 1.0)
    x2 = np.clip(bx + bw / 2, 0.0, 1.0)
    y2 = np.clip(by + bh / 2, 0.0, 1.0)
    boxes = np.stack([x1, y1, x2 - x1, y2 - y1], axis=-1)
    conf = _sigmoid(r[:, :, 4])
    probs = class_probabilities(np.moveaxis(r[:, :, 5:], 2, -1), pose_classes)
    if single:
        return boxes[0], conf[0], probs[0]
    return boxes, conf, probs


def decode(raw, anchors: AnchorSet, pose_classes: Optional[int] = None, frame: int = 0,
           video_id: Optional[str] = None) -> List[Detection]:
    """One frame's raw grid ``[k*(5+K), H', W']`` -> every slot as a :class:`Detection`."""
    boxes, conf, probs = decode_arrays(raw, anchors, pose_classes)
    k, gh, gw = conf.shape
    out = []
    for a in range(k):
        for i in range(gh):
            for j in range(gw):
                out.append(Detection(frame, tuple(float(v) for v in boxes[a, i, j]), float(conf[a, i, j]),
                                     probs[a, i, j].copy(), video_id))
    return out


@dataclass
class Targets:
    """Per-slot regression targets for one batch.

    ``index`` lists the responsible slots as ``(n, a, gy, gx)`` rows;
    ``xy`` / ``wh`` / ``cls`` / ``boxes`` are aligned with it. ``obj`` is the
    dense responsibility mask ``[N, k, H', W']``.
    """

    obj: np.ndarray
    index: np.ndarray
    xy: np.ndarray
    wh: np.ndarray
    cls: np.ndarray
    boxes: np.ndarray
    grid: Tuple[int, int] = field(default=(0, 0))

    @property
    def count(self):
        return len(self.index)


def build_targets(gts: Sequence[Sequence], anchors: AnchorSet, grid: Tuple[int, int], num_classes: int) -> Targets:
    """Assign each ground truth to its centre cell and best co-centred anchor.

    ``gts[n]`` is a list of ``(box, label)`` for batch item ``n``; ``label``
    is a class index or, for multi-label data, a sequence of class indices.
    A later ground truth landing on an already-taken slot replaces it.
    """
    gh, gw = grid
    k = len(anchors)
    n = len(gts)
    obj = np.zeros((n, k, gh, gw), dtype=bool)
    slots = {}
    for b, items in enumerate(gts):
        for box, label in items:
            x, y, w, h = (float(v) for v in box)
            if w <= 0 or h <= 0:
                raise ValueError(f"ground-truth box with non-positive size: {box}")
            cx, cy = (x + w / 2) * gw, (y + h / 2) * gh
            i = min(int(np.floor(cy)), gh - 1)
            j = min(int(np.floor(cx)), gw - 1)
            wg, hg = w * gw, h * gh
            a = int(np.argmax(wh_iou([[wg, hg]], anchors.wh)[0]))
            onehot = np.zeros(num_classes)
            onehot[np.atleast_1d(label).astype(int)] = 1.0
            slots[(b, a, i, j)] = (
                (cx - j, cy - i),
                (np.log(wg / anchors.wh[a, 0]), np.log(hg / anchors.wh[a, 1])),
                onehot,
                (x, y, w, h),
            )
            obj[b, a, i, j] = True
    keys = sorted(slots)
    index = np.array(keys, dtype=int).reshape(-1, 4)
    xy = np.array([slots[s][0] for s in keys], dtype=np.float64).reshape(-1, 2)
    wh = np.array([slots[s][1] for s in keys], dtype=np.float64).reshape(-1, 2)
    cls = np.array([slots[s][2] for s in keys], dtype=np.float64).reshape(-1, num_classes)
    boxes = np.array([slots[s][3] for s in keys], dtype=np.float64).reshape(-1, 4)
    return Targets(obj, index, xy, wh, cls, boxes, (gh, gw))


def targets_to_raw(t: Targets, num_anchors: int, num_classes: int, fill: float = -20.0) -> np.ndarray:
    """Raw grid that decodes exactly to the assigned ground truths.

    Unassigned slots get confidence logit ``fill``.
    """
    n = t.obj.shape[0]
    gh, gw = t.grid
    r = np.zeros((n, num_anchors, 5 + num_classes, gh, gw))
    r[:, :, 4] = fill
    eps = 1e-12
    for (b, a, i, j), xy, wh, cls in zip(t.index, t.xy, t.wh, t.cls):
        p = np.clip(xy, eps, 1 - eps)
        r[b, a, 0:2, i, j] = np.log(p / (1 - p))
        r[b, a, 2:4, i, j] = wh
        r[b, a, 4, i, j] = -fill
        r[b, a, 5:, i, j] = np.where(cls > 0, 10.0, -10.0)
    return r.reshape(n, num_anchors * (5 + num_classes), gh, gw)
