import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actionloc.boxes import iou, iou_matrix, wh_iou
from actionloc.head import (AnchorSet, build_targets, class_probabilities, decode, decode_arrays, kmeans_anchors,
                            kmeans_objective, load_anchors, save_anchors, targets_to_raw)


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 1, 1)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
def test_iou_matrix_matches_scalar(v):
    a = (v[0], v[1], v[2] + 0.01, v[3] + 0.01)
    b = (v[4], v[5], v[6] + 0.01, v[7] + 0.01)
    assert iou_matrix(a, b)[0, 0] == pytest.approx(iou(a, b))
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, b) == pytest.approx(iou(b, a))


def test_kmeans_degenerate():
    a = kmeans_anchors([(0.2, 0.3)] * 6, k=1)
    assert np.allclose(a.wh, [[0.2, 0.3]])


def test_kmeans_scan_oracle():
    boxes = [(0.1, 0.1), (0.3, 0.3)]
    grid = np.linspace(0.05, 0.4, 351)
    scan = min(kmeans_objective(boxes, [[w, h]]) for w in grid for h in grid)
    got = kmeans_anchors(boxes, k=1, seed=0)
    assert kmeans_objective(boxes, got.wh) <= scan + 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_kmeans_fixed_point_and_monotone(seed):
    rng = np.random.default_rng(seed)
    boxes = rng.uniform(0.5, 3.0, size=(80, 2))
    first = kmeans_anchors(boxes, k=4, seed=seed)
    again = kmeans_anchors(boxes, k=4, init=first)
    assert np.array_equal(first.wh, again.wh)
    one_step = kmeans_anchors(boxes, k=4, seed=seed, max_iter=1)
    assert kmeans_objective(boxes, first.wh) <= kmeans_objective(boxes, one_step.wh) + 1e-12


def test_kmeans_needs_enough_boxes():
    with pytest.raises(ValueError):
        kmeans_anchors([(1, 1), (2, 2)], k=3)


def test_anchor_file_roundtrip(tmp_path):
    a = AnchorSet([[1.25, 2.0], [0.5, 0.75]])
    save_anchors(a, tmp_path / "anchors.txt")
    assert np.array_equal(load_anchors(tmp_path / "anchors.txt").wh, a.wh)
    (tmp_path / "bad.txt").write_text("1 2\n3 x\n")
    with pytest.raises(ValueError, match=":2:"):
        load_anchors(tmp_path / "bad.txt")


def test_decode_zero_offsets():
    raw = np.zeros((1 * 9, 8, 8))
    raw[4] = -1e3
    dets = decode(raw, AnchorSet([[1.0, 1.0]]))
    d = dets[0]
    cx, cy = d.box[0] + d.box[2] / 2, d.box[1] + d.box[3] / 2
    assert (cx, cy) == pytest.approx((0.0625, 0.0625))
    assert d.box[2:] == pytest.approx((0.125, 0.125))
    assert d.confidence == pytest.approx(0.0)


def test_decode_width_from_anchor():
    raw = np.zeros((2 * 9, 4, 4))
    boxes, _, _ = decode_arrays(raw, AnchorSet([[1.0, 1.0], [2.0, 0.5]]))
    assert boxes[1, 2, 2, 2] == pytest.approx(2.0 / 4)
    assert boxes[1, 2, 2, 3] == pytest.approx(0.5 / 4)


def test_class_probabilities_modes(rng):
    logits = rng.normal(size=(3, 5))
    assert np.allclose(class_probabilities(logits).sum(-1), 1)
    p = class_probabilities(logits, pose_classes=2)
    assert np.allclose(p[:, :2].sum(-1), 1)
    assert np.allclose(p[:, 2:], 1 / (1 + np.exp(-logits[:, 2:])))


def test_build_targets_cell_and_anchor():
    anchors = AnchorSet([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    # centred in cell (3, 3) of an 8x8 grid, 2 cells wide
    t = build_targets([[((3.5 / 8 - 1 / 8, 3.5 / 8 - 1 / 8, 2 / 8, 2 / 8), 1)]], anchors, (8, 8), 4)
    hot = np.argwhere(t.obj)
    assert hot.tolist() == [[0, 1, 3, 3]]
    assert np.allclose(t.xy, [[0.5, 0.5]])
    assert np.allclose(t.wh, [[0.0, 0.0]])


def test_build_targets_empty():
    t = build_targets([[], []], AnchorSet([[1.0, 1.0]]), (4, 4), 3)
    assert not t.obj.any() and t.count == 0


def test_build_targets_rejects_degenerate():
    with pytest.raises(ValueError):
        build_targets([[((0.1, 0.1, 0.0, 0.2), 0)]], AnchorSet([[1.0, 1.0]]), (4, 4), 2)


def test_tie_picks_lowest_anchor():
    anchors = AnchorSet([[2.0, 1.0], [1.0, 2.0]])
    t = build_targets([[((0.3, 0.3, 1 / 8, 1 / 8), 0)]], anchors, (8, 8), 2)
    assert t.index[0, 1] == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_decode_build_targets_roundtrip(seed):
    rng = np.random.default_rng(seed)
    anchors = AnchorSet(rng.uniform(0.5, 3, size=(5, 2)))
    gts = []
    for _ in range(2):
        items = []
        for _ in range(rng.integers(0, 3)):
            w, h = rng.uniform(0.05, 0.4, size=2)
            x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            items.append(((x, y, w, h), int(rng.integers(4))))
        gts.append(items)
    t = build_targets(gts, anchors, (8, 8), 4)
    raw = targets_to_raw(t, 5, 4)
    boxes, conf, probs = decode_arrays(raw, anchors)
    for (n, a, i, j), box, cls in zip(t.index, t.boxes, t.cls):
        assert np.max(np.abs(boxes[n, a, i, j] - box)) <= 1e-6
        assert conf[n, a, i, j] > 0.99
        assert np.argmax(probs[n, a, i, j]) == np.argmax(cls)
    assert (conf > 0.5).sum() == t.count


def test_wh_iou_cocentred():
    assert wh_iou([[2.0, 2.0]], [[1.0, 1.0]])[0, 0] == pytest.approx(0.25)
