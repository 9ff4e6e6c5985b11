"""Joint SGD training of both branches, CFAM and head."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbones import BackboneConfig
from .data import AnnotatedVideo, ClipSpec, augment, sample_clip
from .head import AnchorSet, build_targets, kmeans_anchors
from .losses import LossConfig, LossReport, balance_weights, yolo_loss
from .model import ActionDetector, ModelConfig
from .tensor import DomainError, Tensor, precision

__all__ = [
    "TrainConfig",
    "SGD",
    "lr_at",
    "train_step",
    "make_batch",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "fit_anchors",
    "TrainingDiverged",
]

log = logging.getLogger(__name__)

MILESTONE_FRACTIONS = (0.5, 0.66, 0.83, 0.92)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: Optional[List[int]] = None
    lr_factor: float = 0.5
    batch_size: int = 8
    max_iter: int = 2000
    lam: float = 0.5
    gamma: float = 2.0
    freeze_3d: bool = False
    ablation: str = "full"
    seed: int = 0
    clip_len: int = 8
    downsample: int = 1
    augment: bool = True
    # class pairs that trade places under a horizontal flip, e.g. [[0, 1]] for left/right motion
    flip_pairs: Optional[List[List[int]]] = None
    class_balance: bool = False
    checkpoint_every: int = 0
    log_every: int = 50
    eval_every: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        ms = self.resolved_milestones()
        # equal milestones are allowed (short runs); each one still halves the rate
        if any(b < a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must not decrease: {ms}")

    def flip_labels(self) -> Dict[int, int]:
        out = {}
        for a, b in self.flip_pairs or ():
            out[int(a)] = int(b)
            out[int(b)] = int(a)
        return out

    def resolved_milestones(self) -> List[int]:
        if self.milestones is not None:
            return list(self.milestones)
        return [int(round(f * self.max_iter)) for f in MILESTONE_FRACTIONS]

    def fingerprint(self, model_cfg: Optional[ModelConfig] = None) -> str:
        payload = {"train": asdict(self), "model": asdict(model_cfg) if model_cfg else None}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    passed = sum(iteration >= m for m in cfg.resolved_milestones())
    return cfg.lr * cfg.lr_factor ** passed


class SGD:
    """``v = mu*v - lr*(g + wd*theta); theta += v``; frozen parameters are skipped."""

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.frozen or p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * (p.grad + self.weight_decay * p.data)
            p.data = p.data + v


def fit_anchors(videos: Sequence[AnnotatedVideo], grid: int, k: int = 5, seed: int = 0,
                max_boxes: int = 4000) -> AnchorSet:
    """k-means anchors over the training boxes, in grid units.

    With fewer than ``k`` distinct box sizes each size becomes an anchor and
    the last one is repeated to fill the set.
    """
    wh = np.array([(a.box[2] * grid, a.box[3] * grid) for v in videos for f in v.annotations for a in f])
    if len(wh) == 0:
        raise ValueError("no ground-truth boxes to fit anchors to")
    if len(wh) > max_boxes:
        wh = wh[np.random.default_rng(seed).choice(len(wh), max_boxes, replace=False)]
    distinct = np.unique(wh, axis=0)
    if len(distinct) < k:
        return AnchorSet(np.concatenate([distinct, np.repeat(distinct[-1:], k - len(distinct), axis=0)]))
    return kmeans_anchors(wh, k, seed=seed)


def _keys(videos, spec: ClipSpec):
    return [(vi, t) for vi, v in enumerate(videos) for t in spec.valid_keys(len(v))]


def make_batch(videos, picks, spec: ClipSpec, rng=None, do_augment=False, flip_labels=None):
    """Stack clips, key frames and ground truths for ``(video index, key frame)`` picks."""
    clips, keys, gts = [], [], []
    for vi, t in picks:
        v = videos[vi]
        clip, key = sample_clip(v, t, spec)
        boxes = [(a.box, a.label) for a in v.annotations[t]]
        if do_augment:
            clip, key, boxes = augment(clip, key, boxes, rng, flip_labels=flip_labels)
        clips.append(clip)
        keys.append(key)
        gts.append(boxes)
    return np.stack(clips), np.stack(keys), gts


def train_step(batch, model: ActionDetector, opt: SGD, lr: float, loss_cfg: LossConfig,
               class_weights=None) -> LossReport:
    clips, keys, gts = batch
    model.train()
    try:
        raw = model(Tensor(clips), Tensor(keys))
        targets = build_targets(gts, model.anchors, raw.shape[2:], model.cfg.num_classes)
        loss, report = yolo_loss(raw, targets, model.anchors, loss_cfg, gts, class_weights)
    except DomainError as exc:
        raise TrainingDiverged(f"non-finite values in the forward pass: {exc}") from exc
    if not np.isfinite(report.L_final):
        norms = {n: float(np.abs(p.data).max()) for n, p in opt.params.items()}
        raise TrainingDiverged(f"non-finite loss {report}; largest |param| per tensor: {norms}")
    opt.zero_grad()
    loss.backward()
    opt.step(lr)
    return report


# --- checkpoints ---------------------------------------------------------

MAGIC = b"ACTIONLOC-CKPT 1\n"


def save_checkpoint(path, model: ActionDetector, opt: Optional[SGD], iteration: int,
                    fingerprint: str, rng: Optional[np.random.Generator] = None, extra=None) -> None:
    """Text header (magic line + one JSON line describing every array) followed by raw array bytes."""
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        arrays.update({f"opt.{k}": v for k, v in opt.velocity.items()})
    arrays["anchors"] = model.anchors.wh
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        # asarray keeps 0-d arrays 0-d; ascontiguousarray would promote them to 1-d
        a = np.asarray(arrays[name])
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset,
                        "nbytes": a.nbytes})
        blobs.append(a.tobytes(order="C"))
        offset += a.nbytes
    header = {
        "iteration": iteration,
        "fingerprint": fingerprint,
        "model_config": asdict(model.cfg),
        "rng": rng.bit_generator.state if rng is not None else None,
        "arrays": entries,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic line {magic[:40]!r})")
        header = json.loads(fh.readline())
        body = fh.read()
    arrays = {}
    for e in header["arrays"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, opt_cfg: Optional[TrainConfig] = None):
    """Rebuild ``(model, optimizer or None, header)`` from a checkpoint file."""
    header, arrays = read_checkpoint(path)
    mc = dict(header["model_config"])
    mc["backbone"] = BackboneConfig(**mc["backbone"])
    model = ActionDetector(ModelConfig(**mc), AnchorSet(arrays["anchors"]))
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
    opt = None
    if opt_cfg is not None:
        opt = SGD(model.named_parameters(), opt_cfg.momentum, opt_cfg.weight_decay)
        for k in opt.velocity:
            opt.velocity[k] = arrays[f"opt.{k}"].copy()
    return model, opt, header


# --- training loop -------------------------------------------------------

def fit(videos: Sequence[AnnotatedVideo], cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None,
        out_dir=None, resume=None, eval_videos=None, eval_fn=None, anchors: Optional[AnchorSet] = None,
        loss_cfg: Optional[LossConfig] = None):
    """Train from scratch (or from ``resume``) until ``cfg.max_iter``.

    ``loss_cfg`` overrides the loss settings; ``cfg.lam`` and ``cfg.gamma``
    still take precedence over its ``lam`` and ``gamma``.

    Returns ``(model, log)`` where ``log`` holds ``(iteration, lr, LossReport)``.
    Checkpoints go to ``out_dir/ckpt_<iter>.bin`` every ``checkpoint_every``
    iterations and to ``out_dir/final.bin`` at the end.
    """
    if not videos:
        raise ValueError("empty training set")
    with precision(cfg.precision):
        return _fit(videos, cfg, model_cfg, out_dir, resume, eval_videos, eval_fn, anchors, loss_cfg)


def _fit(videos, cfg, model_cfg, out_dir, resume, eval_videos, eval_fn, anchors, loss_cfg):
    spec = ClipSpec(cfg.clip_len, cfg.downsample)
    if model_cfg is None:
        model_cfg = ModelConfig(backbone=BackboneConfig(clip_len=cfg.clip_len), ablation=cfg.ablation,
                                num_classes=1 + max(v.label for v in videos), seed=cfg.seed)
    fingerprint = cfg.fingerprint(model_cfg)
    loss_cfg = replace(loss_cfg or LossConfig(), lam=cfg.lam, gamma=cfg.gamma,
                       pose_classes=model_cfg.pose_classes)
    class_weights = None
    if cfg.class_balance:
        counts = np.zeros(model_cfg.num_classes)
        for v in videos:
            for f in v.annotations:
                for a in f:
                    counts[a.label] += 1
        class_weights = balance_weights(counts)

    if resume is not None:
        model, opt, header = load_checkpoint(resume, cfg)
        if header["fingerprint"] != fingerprint:
            raise ValueError(f"checkpoint {resume} was written for a different configuration "
                             f"({header['fingerprint']} != {fingerprint})")
        start = header["iteration"]
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    else:
        rng = np.random.default_rng(cfg.seed)
        if anchors is None:
            anchors = fit_anchors(videos, model_cfg.backbone.grid, model_cfg.num_anchors, seed=cfg.seed)
        model = ActionDetector(model_cfg, anchors)
        opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
        start = 0
    if cfg.freeze_3d and model.backbone3d is not None:
        model.backbone3d.freeze()

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.csv", "a")
        if start == 0:
            log_fh.write("iteration,lr," + LossReport.header() + "\n")

    keys = _keys(videos, spec)
    flip_labels = cfg.flip_labels()
    history = []
    try:
        for it in range(start, cfg.max_iter):
            picks = [keys[i] for i in rng.integers(0, len(keys), cfg.batch_size)]
            batch = make_batch(videos, picks, spec, rng, cfg.augment, flip_labels)
            lr = lr_at(it, cfg)
            report = train_step(batch, model, opt, lr, loss_cfg, class_weights)
            history.append((it, lr, report))
            if log_fh is not None:
                log_fh.write(f"{it},{float(lr)!r},{report.as_row()}\n")
            if cfg.log_every and (it + 1) % cfg.log_every == 0:
                recent = np.mean([r.L_final for _, _, r in history[-cfg.log_every:]])
                log.info("iter %d lr %.3g loss %.4f", it + 1, lr, recent)
            if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{it + 1:06d}.bin", model, opt, it + 1, fingerprint, rng)
            if eval_fn is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                result = eval_fn(model, eval_videos)
                model.train()
                log.info("iter %d eval %s", it + 1, result)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(out / "final.bin", model, opt, cfg.max_iter, fingerprint, rng)
    return model, history
