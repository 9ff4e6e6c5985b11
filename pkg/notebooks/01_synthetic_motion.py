"""
The synthetic motion dataset
============================

Four classes of a single square moving left, right, up or down on a
64x64 frame. A single frame says where the square is but not where it is
going, so any model that only looks at the key frame is stuck near chance.
"""

import numpy as np

from actionloc.data import ClipSpec, SynthConfig, sample_clip, synth_generate

cfg = SynthConfig(train_per_class=2, test_per_class=1)
splits = synth_generate(cfg)
print({k: len(v) for k, v in splits.items()})

###############################################################################
# Each video carries one annotation per frame: a box in [0, 1] coordinates
# and a class index.

video = splits["train"][0]
print(video.video_id, len(video), cfg.classes[video.label])
for t in (0, 20, 39):
    print(t, np.round(video.annotations[t][0].box, 3))

###############################################################################
# A clip is the D frames ending at the key frame, repeated at the start of
# the video so every frame can be a key frame.

clip, key = sample_clip(video, 3, ClipSpec(8, 1))
print(clip.shape, key.shape)
print(np.array_equal(clip[:, 0], clip[:, 4]))  # frame 0 padded forward

###############################################################################
# Position alone does not separate the classes: the per-frame box centres
# of left and right movers are drawn from the same distribution.

many = synth_generate(SynthConfig(train_per_class=40, test_per_class=0))["train"]
for c, name in enumerate(cfg.classes):
    xs = [f[0].box[0] for v in many if v.label == c for f in v.annotations]
    print(f"{name:>6} mean x {np.mean(xs):.3f} sd {np.std(xs):.3f}")
