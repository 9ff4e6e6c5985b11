"""Command-line entry point: ``actionloc <command> ...``.

Stages exchange plain files so any stage can be rerun from saved inputs:
``synth`` -> ``train`` -> ``detect`` -> ``link`` -> ``eval``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("actionloc")


class CommandError(Exception):
    pass


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stamp(out: Path, cfg: RunConfig, command: str, args) -> None:
    (out / "config.json").write_text(cfg.dumps() + "\n")
    stamp = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "seed": cfg.train.seed,
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    (out / "stamp.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["data.seed"] = args.seed
        overrides["train.seed"] = args.seed
    for flag, key in (("precision", "train.precision"), ("clip_len", "train.clip_len"),
                      ("downsample", "train.downsample"), ("ablation", "train.ablation")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        return load_config(getattr(args, "config", None), overrides)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        raise CommandError(f"bad configuration: {exc}") from None


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}")
    return p


def _load_split(dataset, split):
    from .data import load_dataset

    _require(Path(dataset) / "manifest.txt", "dataset manifest")
    splits = load_dataset(dataset, [split])
    if split not in splits:
        raise CommandError(f"dataset {dataset} has no '{split}' split")
    return splits[split]


def _clip_spec(cfg: RunConfig, header=None):
    from .data import ClipSpec

    length = cfg.train.clip_len if header is None else header["model_config"]["backbone"]["clip_len"]
    return ClipSpec(length, cfg.train.downsample)


# --- commands ------------------------------------------------------------

def cmd_synth(args):
    from .data import save_dataset, synth_generate

    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    splits = synth_generate(cfg.data)
    save_dataset(splits, out)
    _stamp(out, cfg, "synth", args)
    print(f"wrote {sum(len(v) for v in splits.values())} videos to {out}")


def cmd_anchors(args):
    from .head import save_anchors
    from .train import fit_anchors

    cfg = _config(args)
    videos = _load_split(args.dataset, "train")
    anchors = fit_anchors(videos, cfg.backbone.grid, args.k, seed=cfg.train.seed)
    save_anchors(anchors, args.out)
    print(f"wrote {len(anchors)} anchors to {args.out}")


def cmd_train(args):
    from .data import flip_label_map
    from .head import load_anchors
    from .tensor import precision
    from .train import fit

    cfg = _config(args)
    out = _prepare_out(args.out, args.force or args.resume is not None)
    videos = _load_split(args.dataset, "train")
    anchors = load_anchors(_require(args.anchors, "anchor file")) if args.anchors else None
    if cfg.train.flip_pairs is None:
        cfg.train.flip_pairs = [list(p) for p in flip_label_map(cfg.data.classes).items() if p[0] < p[1]]
    _stamp(out, cfg, "train", args)
    with precision(cfg.train.precision):
        model_cfg = cfg.model_config()
    fit(videos, cfg.train, model_cfg, out_dir=out, resume=args.resume, anchors=anchors, loss_cfg=cfg.loss)
    print(f"final checkpoint: {out / 'final.bin'}")


def _load_model(path):
    from .train import load_checkpoint

    _require(path, "checkpoint")
    try:
        model, _, header = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CommandError(f"cannot load checkpoint {path}: {exc}") from None
    return model, header


def cmd_detect(args):
    from .inference import detect_video, save_detections
    from .lfb import build_bank

    cfg = _config(args)
    model, header = _load_model(args.checkpoint)
    videos = _load_split(args.dataset, args.split)
    spec = _clip_spec(cfg, header)
    out = _prepare_out(args.out, args.force)
    use_lfb = args.lfb == "on"
    if use_lfb and model.backbone3d is None:
        raise CommandError("feature bank needs a model with a 3D branch")

    def run(v):
        bank = build_bank(v, model.backbone3d, cfg.lfb.clip_len, window=cfg.lfb.window) if use_lfb else None
        return detect_video(model, v, spec, cfg.nms, bank=bank)

    model.eval()
    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            results = list(pool.map(run, videos))
    else:
        results = [run(v) for v in videos]
    save_detections(results, out / "detections.txt")
    _stamp(out, cfg, "detect", args)
    meta = {"non_causal": use_lfb, "checkpoint": str(args.checkpoint), "split": args.split,
            "num_classes": model.cfg.num_classes}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote detections for {len(results)} videos to {out / 'detections.txt'}")


def _frames_from_records(records):
    """Group frame records into ``{video: {class: {frame: [Detection]}}}``."""
    from .head import Detection

    grouped = {}
    for r in records:
        vid, frame = r.key
        onehot = np.zeros(r.label + 1)
        onehot[r.label] = 1.0
        det = Detection(frame, r.box, r.score, onehot, vid)
        grouped.setdefault(vid, {}).setdefault(r.label, {}).setdefault(frame, []).append(det)
    return grouped


def cmd_link(args):
    from .inference import load_detections
    from .linking import save_tubes, viterbi_link

    cfg = _config(args)
    src = _require(args.detections, "detection file")
    records = load_detections(src)
    out = _prepare_out(args.out, args.force)
    lengths = {}
    if args.dataset:
        from .data import read_manifest

        lengths = {row[0]: row[3] for row in read_manifest(_require(Path(args.dataset) / "manifest.txt", "dataset manifest"))}
    tubes = []
    for vid, per_class in sorted(_frames_from_records(records).items()):
        for c, frames in sorted(per_class.items()):
            n = lengths.get(vid, max(frames) + 1)
            tubes.extend(viterbi_link([frames.get(t, []) for t in range(n)], c, cfg.link, video_id=vid))
    save_tubes(tubes, out / "tubes.txt")
    _stamp(out, cfg, "link", args)
    print(f"wrote {len(tubes)} tubes to {out / 'tubes.txt'}")


def cmd_eval(args):
    from .inference import gt_records, gt_tubes, load_detections
    from .linking import load_tubes
    from .metrics import diagnostics, frame_map, video_map

    cfg = _config(args)
    if not args.detections and not args.tubes:
        raise CommandError("give --detections and/or --tubes")
    videos = _load_split(args.dataset, args.split)
    out = _prepare_out(args.out, args.force)
    text, records = [], []
    if args.detections:
        dets = load_detections(_require(args.detections, "detection file"))
        gts = [g for v in videos for g in gt_records(v)]
        rep = frame_map(dets, gts, args.iou)
        rep.recall, rep.accuracy = diagnostics(_top_labels(dets), gts, args.iou)
        text.append(rep.table())
        records += rep.records()
    if args.tubes:
        tubes = load_tubes(_require(args.tubes, "tube file"))
        gtt = [t for v in videos for t in gt_tubes(v)]
        for rep in video_map(tubes, gtt).values():
            text.append(rep.table())
            records += rep.records()
    (out / "report.txt").write_text("\n\n".join(text) + "\n")
    (out / "report.records").write_text("\n".join(records) + "\n")
    _stamp(out, cfg, "eval", args)
    print("\n\n".join(text))


def _top_labels(dets):
    """Keep the best-scoring class per (frame, box) for the recall/accuracy split."""
    best = {}
    for d in dets:
        k = (d.key, d.box)
        if k not in best or d.score > best[k].score:
            best[k] = d
    return list(best.values())


def cmd_bench(args):
    from .bench import benchmark

    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    base = None
    if args.checkpoint:
        model, header = _load_model(args.checkpoint)
        base = model.cfg
    report = benchmark(cfg, base, clip_lens=tuple(args.clip_lens), clips=args.clips, batch=args.batch,
                       downsample=cfg.train.downsample)
    lines = ["clip_len fps latency_ms clips frames seconds"]
    for r in report:
        lines.append(f"{r['clip_len']} {r['fps']:.3f} {1000 * r['latency']:.3f} {r['clips']} {r['frames']} "
                     f"{r['seconds']:.4f}")
    (out / "bench.txt").write_text("\n".join(lines) + "\n")
    (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
    _stamp(out, cfg, "bench", args)
    print("\n".join(lines))


def cmd_inspect(args):
    from .bench import activation_heatmaps

    cfg = _config(args)
    model, header = _load_model(args.checkpoint)
    videos = {v.video_id: v for v in _load_split(args.dataset, args.split)}
    if args.video not in videos:
        raise CommandError(f"video {args.video!r} not in the {args.split} split")
    out = _prepare_out(args.out, args.force)
    paths = activation_heatmaps(model, videos[args.video], args.frame, _clip_spec(cfg, header), out)
    _stamp(out, cfg, "inspect", args)
    for p in paths:
        print(p)


# --- argument parsing ----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actionloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--precision", choices=["single", "double"])
        sp.add_argument("--clip-len", type=int, choices=[8, 16, 32])
        sp.add_argument("--downsample", type=int, choices=[1, 2, 3])
        sp.add_argument("--ablation", choices=["2d", "3d", "concat", "full"])
        sp.add_argument("--lfb", choices=["on", "off"], default="off")
        if out:
            sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("synth", help="generate the synthetic motion dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("anchors", help="k-means anchors from training boxes")
    common(sp)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.set_defaults(func=cmd_anchors)

    sp = sub.add_parser("train", help="train a detector")
    common(sp)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--anchors", type=Path)
    sp.add_argument("--resume", type=Path)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("detect", help="frame detections for a dataset split")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("link", help="link frame detections into tubes")
    common(sp)
    sp.add_argument("--detections", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, help="dataset giving video lengths")
    sp.set_defaults(func=cmd_link)

    sp = sub.add_parser("eval", help="frame-mAP and/or video-mAP")
    common(sp)
    sp.add_argument("--detections", type=Path)
    sp.add_argument("--tubes", type=Path)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--iou", type=float, default=0.5)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="throughput for 8- and 16-frame clips")
    common(sp)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--clip-lens", type=int, nargs="+", default=[8, 16])
    sp.add_argument("--clips", type=int, default=16)
    sp.add_argument("--batch", type=int, default=1)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("inspect", help="activation heatmaps of both branches")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--video", required=True)
    sp.add_argument("--frame", type=int, required=True)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except CommandError as exc:
        print(f"actionloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        # malformed input files surface here; report them without a traceback
        print(f"actionloc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
