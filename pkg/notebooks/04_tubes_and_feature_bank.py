"""
Action tubes and the long-term feature bank
===========================================

Per-frame detections are linked into tubes with a Viterbi pass per class,
then the same video is run again with 3D features averaged over
neighbouring clips. The averaged features look into the future, so that
variant is not causal. Training takes a few CPU-minutes; confidences only
climb past the 0.25 filter once boxes are good, because the confidence
target is the IoU of the predicted box.
"""

import dataclasses

from actionloc.config import load_config
from actionloc.data import ClipSpec, SynthConfig, synth_generate
from actionloc.inference import detect_video, link_video
from actionloc.lfb import build_bank
from actionloc.train import fit

cfg = load_config(None, {"train.lr": 0.01, "train.max_iter": 1500, "train.flip_pairs": [[0, 1]], "train.log_every": 0})
splits = synth_generate(dataclasses.replace(cfg.data, train_per_class=30, test_per_class=2))
model, _ = fit(splits["train"], cfg.train, cfg.model_config(), loss_cfg=cfg.loss)

###############################################################################
# Link one test video and look at the tubes.

video = splits["test"][0]
spec = ClipSpec(8, 1)
vd = detect_video(model, video, spec, cfg.nms)
tubes = link_video(vd, model.cfg.num_classes, cfg.link)
print("truth:", cfg.data.classes[video.label], "tubes:", len(tubes))
for tb in sorted(tubes, key=lambda t: -t.score)[:3]:
    print(cfg.data.classes[tb.label], tb.frames[0], tb.frames[-1], round(tb.score, 3), tb.is_contiguous())

###############################################################################
# Feature bank: one 3D feature per non-overlapping 8-frame clip.

bank = build_bank(video, model.backbone3d, window=cfg.lfb.window)
print("bank entries:", sorted(bank.features))
print("frames averaged for key frame 12:", bank.selection(12, cfg.lfb.window))
with_bank = detect_video(model, video, spec, cfg.nms, bank=bank)
print("non-causal:", with_bank.non_causal)
