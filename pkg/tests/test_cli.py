import json

import numpy as np
import pytest

from actionloc.cli import main
from actionloc.config import ConfigError, RunConfig, load_config

TINY = {
    "data": {"train_per_class": 2, "test_per_class": 1},
    "backbone": {"widths_2d": [4, 8, 8], "widths_3d": [4, 8, 8]},
    "model": {"cfam_out": 8},
    "train": {"lr": 0.01, "max_iter": 3, "batch_size": 2, "log_every": 0, "checkpoint_every": 2},
    "nms": {"conf_thresh": 0.0},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    assert main(["synth", *c, "--out", str(root / "data")]) == 0
    assert main(["anchors", *c, "--dataset", str(root / "data"), "--out", str(root / "anchors.txt")]) == 0
    assert main(["train", *c, "--dataset", str(root / "data"), "--anchors", str(root / "anchors.txt"),
                 "--out", str(root / "run")]) == 0
    ck = str(root / "run" / "final.bin")
    assert main(["detect", *c, "--checkpoint", ck, "--dataset", str(root / "data"), "--out", str(root / "det")]) == 0
    assert main(["link", *c, "--detections", str(root / "det" / "detections.txt"), "--dataset", str(root / "data"),
                 "--out", str(root / "link")]) == 0
    assert main(["eval", *c, "--detections", str(root / "det" / "detections.txt"), "--tubes",
                 str(root / "link" / "tubes.txt"), "--dataset", str(root / "data"), "--out", str(root / "eval")]) == 0
    return root, c


def test_pipeline_outputs(workspace):
    root, _ = workspace
    manifest = (root / "data" / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "# video_id split label frames" and len(manifest) == 13
    assert (root / "run" / "ckpt_000002.bin").exists()
    assert (root / "run" / "train_log.csv").read_text().count("\n") == 4
    for d in ("data", "run", "det", "link", "eval"):
        stamp = json.loads((root / d / "stamp.json").read_text())
        assert stamp["version"] and "seed" in stamp
        echoed = json.loads((root / d / "config.json").read_text())
        assert echoed["data"]["train_per_class"] == 2
    assert (root / "det" / "detections.txt").read_text().startswith("# video_id frame class score x y w h")
    assert "video-mAP" in (root / "eval" / "report.txt").read_text()
    assert json.loads((root / "det" / "meta.json").read_text())["non_causal"] is False


def test_train_echo_records_flip_pairs(workspace):
    root, _ = workspace
    assert json.loads((root / "run" / "config.json").read_text())["train"]["flip_pairs"] == [[0, 1]]


def test_stages_rerun_byte_identical(workspace):
    root, c = workspace
    ck = str(root / "run" / "final.bin")
    main(["detect", *c, "--checkpoint", ck, "--dataset", str(root / "data"), "--out", str(root / "det2")])
    assert (root / "det2" / "detections.txt").read_bytes() == (root / "det" / "detections.txt").read_bytes()
    main(["link", *c, "--detections", str(root / "det" / "detections.txt"), "--dataset", str(root / "data"),
          "--out", str(root / "link2")])
    assert (root / "link2" / "tubes.txt").read_bytes() == (root / "link" / "tubes.txt").read_bytes()
    main(["eval", *c, "--detections", str(root / "det" / "detections.txt"), "--tubes", str(root / "link" / "tubes.txt"),
          "--dataset", str(root / "data"), "--out", str(root / "eval2")])
    assert (root / "eval2" / "report.txt").read_bytes() == (root / "eval" / "report.txt").read_bytes()


def test_detect_threads_match(workspace):
    root, c = workspace
    main(["detect", *c, "--checkpoint", str(root / "run" / "final.bin"), "--dataset", str(root / "data"),
          "--threads", "2", "--out", str(root / "det3")])
    assert (root / "det3" / "detections.txt").read_bytes() == (root / "det" / "detections.txt").read_bytes()


def test_synth_same_seed_same_manifest(workspace, tmp_path):
    root, c = workspace
    main(["synth", *c, "--out", str(tmp_path / "again")])
    assert (tmp_path / "again" / "manifest.txt").read_bytes() == (root / "data" / "manifest.txt").read_bytes()
    main(["synth", *c, "--seed", "5", "--out", str(tmp_path / "other")])
    a = (root / "data" / "videos" / "train_left_0000" / "00000.png").read_bytes()
    b = (tmp_path / "other" / "videos" / "train_left_0000" / "00000.png").read_bytes()
    assert a != b


def test_perfect_detections_score_one(workspace, tmp_path):
    root, c = workspace
    lines = ["# video_id frame class score x y w h"]
    for row in (root / "data" / "manifest.txt").read_text().splitlines()[1:]:
        vid, split = row.split()[:2]
        if split != "test":
            continue
        for ann in (root / "data" / "annotations" / f"{vid}.txt").read_text().splitlines():
            t, cls, *box = ann.split()
            lines.append(f"{vid} {t} {cls} 0.9 {' '.join(box)}")
    (tmp_path / "perfect.txt").write_text("\n".join(lines) + "\n")
    assert main(["eval", *c, "--detections", str(tmp_path / "perfect.txt"), "--dataset", str(root / "data"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert "frame 0.5 mAP 1.0" in (tmp_path / "ev" / "report.records").read_text().splitlines()


def test_refuses_nonempty_out(workspace, capsys):
    root, c = workspace
    assert main(["synth", *c, "--out", str(root / "data")]) == 2
    assert "--force" in capsys.readouterr().err


def test_missing_inputs_are_reported(workspace, tmp_path, capsys):
    root, c = workspace
    assert main(["detect", *c, "--checkpoint", str(tmp_path / "nope.bin"), "--dataset", str(root / "data"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "checkpoint not found" in capsys.readouterr().err
    (tmp_path / "bad.txt").write_text("v 0 0 0.5\n")
    assert main(["link", *c, "--detections", str(tmp_path / "bad.txt"), "--dataset", str(root / "data"),
                 "--out", str(tmp_path / "o2")]) == 1
    assert "expected 8 fields" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        load_config(None, {"nms.bogus": 1})


def test_config_roundtrip():
    cfg = RunConfig()
    again = load_config(None, {})
    assert again.to_dict() == cfg.to_dict()
    assert json.loads(cfg.dumps())["link"] == {"alpha": 1.0, "beta": 0.5}


def test_bench_latency_order(workspace, tmp_path):
    root, c = workspace
    assert main(["bench", *c, "--clips", "6", "--out", str(tmp_path / "b")]) == 0
    rows = json.loads((tmp_path / "b" / "bench.json").read_text())
    lat = {r["clip_len"]: r["latency"] for r in rows}
    assert set(lat) == {8, 16} and all(r["fps"] > 0 for r in rows)
    assert lat[8] <= lat[16]


def test_inspect_heatmaps(workspace, tmp_path):
    import cv2

    root, c = workspace
    assert main(["inspect", *c, "--checkpoint", str(root / "run" / "final.bin"), "--dataset", str(root / "data"),
                 "--video", "test_up_0000", "--frame", "12", "--out", str(tmp_path / "i")]) == 0
    for name in ("heatmap_2d.png", "heatmap_3d.png"):
        img = cv2.imread(str(tmp_path / "i" / name))
        assert img is not None and img.shape == (256, 256, 3)


def test_lfb_detect_marked_non_causal(workspace, tmp_path):
    root, c = workspace
    assert main(["detect", *c, "--checkpoint", str(root / "run" / "final.bin"), "--dataset", str(root / "data"),
                 "--lfb", "on", "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d" / "meta.json").read_text())["non_causal"] is True
