"""Box geometry. Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner."""
from __future__ import annotations

import numpy as np

__all__ = ["iou", "iou_matrix", "center_to_corner", "corner_to_center", "clip_unit", "wh_iou"]


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, ``[n, 4] x [m, 4] -> [n, m]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    y2 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def wh_iou(wh, centroids) -> np.ndarray:
    """IoU of co-centred boxes given only widths and heights, ``[n, 2] x [k, 2] -> [n, k]``."""
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(wh[:, None, 0], c[None, :, 0]) * np.minimum(wh[:, None, 1], c[None, :, 1])
    union = (wh[:, 0] * wh[:, 1])[:, None] + (c[:, 0] * c[:, 1])[None, :] - inter
    return inter / union


def center_to_corner(cx, cy, w, h):
    return cx - w / 2, cy - h / 2, w, h


def corner_to_center(x, y, w, h):
    return x + w / 2, y + h / 2, w, h


def clip_unit(box):
    """Clip a box to the unit square, keeping the top-left + size layout."""
    x, y, w, h = (float(v) for v in box)
    x1, y1 = min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)
    x2, y2 = min(max(x + w, 0.0), 1.0), min(max(y + h, 0.0), 1.0)
    return (x1, y1, x2 - x1, y2 - y1)
