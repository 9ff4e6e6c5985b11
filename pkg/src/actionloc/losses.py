"""Training objectives: smooth-L1 boxes, squared-error confidence, focal classification."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import iou_matrix
from .head import AnchorSet, Targets, decode_arrays
from .tensor import Tensor, custom_op

__all__ = [
    "LossConfig",
    "LossReport",
    "smooth_l1",
    "mse_conf",
    "focal_loss",
    "balance_weights",
    "classification_loss",
    "total_loss",
    "detection_loss",
    "yolo_loss",
]

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    lam: float = 0.5
    gamma: float = 2.0
    coord_scale: float = 5.0
    object_scale: float = 1.0
    noobject_scale: float = 0.5
    # predictions overlapping any ground truth above this are not pushed towards zero confidence
    ignore_thresh: float = 0.6
    # confidence target is the IoU of the current prediction (True) or 1 (False)
    rescore: bool = True
    pose_classes: Optional[int] = None


@dataclass
class LossReport:
    L_x: float
    L_y: float
    L_w: float
    L_h: float
    L_conf: float
    L_D: float
    L_Cls: float
    L_final: float

    FIELDS = ("L_x", "L_y", "L_w", "L_h", "L_conf", "L_D", "L_Cls", "L_final")

    def as_row(self) -> str:
        return ",".join(repr(float(getattr(self, f))) for f in self.FIELDS)

    @classmethod
    def header(cls) -> str:
        return ",".join(cls.FIELDS)

    def to_dict(self):
        return asdict(self)


def smooth_l1(x, y, weight=None) -> Tensor:
    """Sum of ``0.5 d^2`` (``|d| < 1``) or ``|d| - 0.5`` with ``d = x - y``."""
    x = T._as_tensor(x)
    y = np.asarray(y, dtype=x.dtype)
    d = x.data - y
    small = np.abs(d) < 1
    per = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    dgrad = np.where(small, d, np.sign(d))
    if weight is not None:
        weight = np.broadcast_to(np.asarray(weight, dtype=x.dtype), d.shape)
        per = per * weight
        dgrad = dgrad * weight
    return custom_op(np.asarray(per.sum(), dtype=x.dtype), (x,), lambda g: (g * dgrad,), "smooth_l1")


def mse_conf(x, y, weight=None) -> Tensor:
    """Sum of ``weight * (x - y)^2``."""
    x = T._as_tensor(x)
    y = np.asarray(y, dtype=x.dtype)
    d = x.data - y
    w = 1.0 if weight is None else np.broadcast_to(np.asarray(weight, dtype=x.dtype), d.shape)
    return custom_op(np.asarray((w * d * d).sum(), dtype=x.dtype), (x,), lambda g: (g * 2 * w * d,), "mse")


def focal_loss(x, y, gamma: float = 2.0, alpha=1.0) -> Tensor:
    """Summed ``-alpha * [y (1-x)^g log x + (1-y) x^g log(1-x)]``.

    ``x`` are probabilities, clamped to ``[1e-7, 1 - 1e-7]``; ``alpha``
    broadcasts against ``x``.
    """
    x = T.clamp(T._as_tensor(x), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(y, dtype=x.dtype)
    alpha = np.asarray(alpha, dtype=x.dtype)
    one_minus = 1.0 - x
    terms = []
    if np.any(y != 0):
        terms.append(T.mul(y, T.mul(T.power(one_minus, gamma), T.log(x))))
    if np.any(y != 1):
        terms.append(T.mul(1.0 - y, T.mul(T.power(x, gamma), T.log(one_minus))))
    inner = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return T.reduce_sum(T.mul(-alpha, inner))


def balance_weights(class_counts: Sequence[float]) -> np.ndarray:
    """``exp(-n_c / sum(n))``: rarer classes get weights closer to 1."""
    n = np.asarray(class_counts, dtype=np.float64)
    if np.any(n < 0):
        raise ValueError("class counts must be non-negative")
    total = n.sum()
    if total <= 0:
        raise ValueError("class counts sum to zero")
    return np.exp(-n / total)


def classification_loss(logits: Tensor, targets, gamma: float = 2.0, weights=None,
                        pose_classes: Optional[int] = None) -> Tensor:
    """Focal loss over responsible slots.

    ``logits`` and ``targets`` are ``[M, K]``. Single-label mode
    (``pose_classes`` is None) applies the focal term to the softmax
    probability of the target class. Multi-label mode softmaxes the first
    ``pose_classes`` columns (target must be one-hot there) and applies
    per-class sigmoid focal terms to the remaining columns.
    """
    targets = np.asarray(targets, dtype=logits.dtype)
    k = targets.shape[1]
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if pose_classes is None:
        onehot, cols = targets, slice(None)
    else:
        onehot, cols = targets[:, :pose_classes], slice(0, pose_classes)
    if not np.all(onehot.sum(axis=1) == 1):
        raise ValueError("classification target must be one-hot over the softmax group")
    probs = T.softmax_rows(logits[:, cols] if pose_classes is not None else logits, axis=-1)
    p_t = T.reduce_sum(T.mul(probs, onehot), axis=1)
    alpha_t = onehot @ w[cols]
    loss = focal_loss(p_t, np.ones(len(targets)), gamma, alpha_t)
    if pose_classes is not None and pose_classes < k:
        inter = T.sigmoid(logits[:, pose_classes:])
        loss = loss + focal_loss(inter, targets[:, pose_classes:], gamma, w[pose_classes:][None, :])
    return loss


def total_loss(detection, classification, lam: float = 0.5):
    """``lam * L_D + L_Cls``; works on floats or tensors."""
    if isinstance(detection, LossReport):
        return lam * detection.L_D + detection.L_Cls
    return detection * lam + classification


def detection_loss(raw: Tensor, targets: Targets, anchors: AnchorSet, cfg: LossConfig, gts=None):
    """Box and confidence terms, each summed over slots and divided by batch size.

    Returns a dict of scalar tensors ``L_x, L_y, L_w, L_h, L_conf`` plus the
    gathered responsible-slot predictions ``sel`` (``[M, 5+K]``).
    """
    n, ch, gh, gw = raw.shape
    k = len(anchors)
    r = raw.reshape((n, k, ch // k, gh, gw))
    scale = 1.0 / n

    boxes, _, _ = decode_arrays(raw.data, anchors)
    conf_t = np.zeros((n, k, gh, gw))
    w_conf = np.full((n, k, gh, gw), cfg.noobject_scale)
    if gts is not None and cfg.ignore_thresh < 1:
        for b, items in enumerate(gts):
            if not items:
                continue
            ious = iou_matrix(boxes[b].reshape(-1, 4), [box for box, _ in items]).max(axis=1)
            w_conf[b][ious.reshape(k, gh, gw) > cfg.ignore_thresh] = 0.0

    out = {}
    idx = targets.index
    if targets.count:
        bi, ai, ii, ji = idx.T
        sel = r[bi, ai, :, ii, ji]
        pred = boxes[bi, ai, ii, ji]
        ious = np.array([iou_matrix(p, g)[0, 0] for p, g in zip(pred, targets.boxes)])
        conf_t[bi, ai, ii, ji] = ious if cfg.rescore else 1.0
        w_conf[bi, ai, ii, ji] = cfg.object_scale
        c = cfg.coord_scale * scale
        out["L_x"] = smooth_l1(T.sigmoid(sel[:, 0]), targets.xy[:, 0]) * c
        out["L_y"] = smooth_l1(T.sigmoid(sel[:, 1]), targets.xy[:, 1]) * c
        out["L_w"] = smooth_l1(sel[:, 2], targets.wh[:, 0]) * c
        out["L_h"] = smooth_l1(sel[:, 3], targets.wh[:, 1]) * c
        out["sel"] = sel
    else:
        zero = T.reduce_sum(r[:, :, 0]) * 0.0
        for key in ("L_x", "L_y", "L_w", "L_h"):
            out[key] = zero
        out["sel"] = None
    out["L_conf"] = mse_conf(T.sigmoid(r[:, :, 4]), conf_t, w_conf) * scale
    return out


def yolo_loss(raw: Tensor, targets: Targets, anchors: AnchorSet, cfg: LossConfig, gts=None,
              class_weights=None):
    """Full objective. Returns ``(L_final tensor, LossReport)``."""
    n = raw.shape[0]
    parts = detection_loss(raw, targets, anchors, cfg, gts)
    l_d = parts["L_x"] + parts["L_y"] + parts["L_w"] + parts["L_h"] + parts["L_conf"]
    if parts["sel"] is not None:
        l_cls = classification_loss(parts["sel"][:, 5:], targets.cls, cfg.gamma, class_weights,
                                    cfg.pose_classes) * (1.0 / n)
    else:
        l_cls = l_d * 0.0
    final = total_loss(l_d, l_cls, cfg.lam)
    report = LossReport(*(float(parts[k].data) for k in ("L_x", "L_y", "L_w", "L_h", "L_conf")),
                        float(l_d.data), float(l_cls.data), float(final.data))
    return final, report
