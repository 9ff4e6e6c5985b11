import numpy as np
import pytest

from actionloc.boxes import iou
from actionloc.head import Detection
from actionloc.postprocess import NmsConfig, filter_confidence, nms, nms_indices, postprocess_frame
from oracles import exhaustive_nms


def det(box, conf, probs=(1.0,)):
    return Detection(0, box, conf, np.asarray(probs, dtype=float))


def test_filter_confidence_strict():
    dets = [det((0, 0, 1, 1), c) for c in (0.9, 0.25, 0.1)]
    assert [d.confidence for d in filter_confidence(dets, 0.25)] == [0.9]
    assert len(filter_confidence(dets, 0.0)) == 3
    assert filter_confidence([], 0.25) == []


def test_nms_examples():
    a = det((0.0, 0.0, 1.0, 1.0), 0.9)
    b = det((0.0, 0.0, 1.0, 0.8), 0.7)
    assert iou(a.box, b.box) == pytest.approx(0.8)
    assert nms([a, b], 0, 0.4) == [a]
    far = [det((i * 2.0, 0.0, 1.0, 1.0), 0.5 + 0.01 * i) for i in range(4)]
    assert len(nms(far, 0, 0.4)) == 4


def test_nms_matches_exhaustive_oracle():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 9))
        xy = rng.uniform(0, 0.6, size=(n, 2))
        wh = rng.uniform(0.1, 0.4, size=(n, 2))
        boxes = [tuple(b) for b in np.concatenate([xy, wh], axis=1)]
        scores = rng.choice([0.2, 0.4, 0.6, 0.8], size=n) if seed % 3 == 0 else rng.random(n)
        thresh = float(rng.choice([0.3, 0.4, 0.5]))
        assert nms_indices(boxes, scores, thresh) == exhaustive_nms(boxes, scores, thresh), seed


def test_postprocess_per_class():
    a = det((0.0, 0.0, 0.5, 0.5), 0.9, (0.9, 0.1))
    b = det((0.05, 0.0, 0.5, 0.5), 0.8, (0.1, 0.9))
    low = det((0.5, 0.5, 0.2, 0.2), 0.2, (0.5, 0.5))
    out = postprocess_frame([a, b, low], 2, NmsConfig())
    assert out[0] == [a]
    assert out[1] == [b]


def test_nms_config_bounds():
    with pytest.raises(ValueError):
        NmsConfig(conf_thresh=1.5)
    assert NmsConfig.multi_label().nms_thresh == 0.5
