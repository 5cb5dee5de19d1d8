"""End-to-end command-line workflow on tiny synthetic data."""

import json
import subprocess
import sys

import numpy as np
import pytest

from altseg.checkpoint import load_pipeline, read_bundle
from altseg.cli import main
from altseg.codec import decode_clip, load_clip
from altseg.evaluate import RatePoint, save_curve
from altseg.tensor import load_labels, load_tensor

HR_CONFIG = {
    "model": {"in_channels": 1, "hidden": 4, "feature_channels": 4,
              "classes": 3, "alpha": 1.0},
    "train": {"epochs": 2, "lr": 0.05, "momentum": 0.9, "seed": 0},
}
LR_CONFIG = {
    "model": {"alpha": 0.5},
    "fusion": {"variant": "la", "neighborhood": 3},
    "train": {"epochs": 2, "lr": 0.05, "momentum": 0.9, "seed": 0},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> encode -> train-hr -> train-lr, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    clips = root / "clips"
    clips.mkdir()
    assert main(["synth", "--out", str(data), "--clips", "2", "--frames", "4",
                 "--height", "16", "--width", "16", "--seed", "3",
                 "--annotate", "all"]) == 0
    for clip_dir in sorted(data.glob("clip_*")):
        if clip_dir.is_dir():
            assert main(["encode", "--in", str(clip_dir),
                         "--out", str(clips / f"{clip_dir.name}.arsg"),
                         "--gop", "4", "--block", "4", "--search", "2"]) == 0
    hr_cfg = root / "hr.json"
    hr_cfg.write_text(json.dumps(HR_CONFIG))
    lr_cfg = root / "lr.json"
    lr_cfg.write_text(json.dumps(LR_CONFIG))
    hr_ckpt = root / "hr.arwt"
    lr_ckpt = root / "lr.arwt"
    assert main(["train-hr", "--clip", str(clips), "--labels", str(data),
                 "--config", str(hr_cfg), "--out", str(hr_ckpt),
                 "--history", str(root / "hr_history.csv")]) == 0
    assert main(["train-lr", "--clip", str(clips), "--labels", str(data),
                 "--hr-ckpt", str(hr_ckpt), "--config", str(lr_cfg),
                 "--out", str(lr_ckpt)]) == 0
    return {"root": root, "data": data, "clips": clips,
            "hr_cfg": hr_cfg, "lr_cfg": lr_cfg,
            "hr_ckpt": hr_ckpt, "lr_ckpt": lr_ckpt}


def test_synth_writes_frames_and_labels(workspace):
    data = workspace["data"]
    frame = load_tensor(data / "clip_000" / "frame_0000.tnsr")
    assert frame.shape == (1, 16, 16)
    labels = load_labels(data / "clip_000.labels.tnsr")
    assert labels.shape == (4, 16, 16)
    assert set(np.unique(labels)) == {0, 1, 2}


def test_synth_annotate_last_masks_earlier_frames(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--clips", "1", "--frames",
                 "3", "--height", "16", "--width", "16", "--annotate",
                 "last"]) == 0
    labels = load_labels(tmp_path / "clip_000.labels.tnsr")
    assert (labels[:2] == -1).all()
    assert set(np.unique(labels[2])) == {0, 1, 2}


def test_encode_preserves_frames(workspace):
    clip = load_clip(workspace["clips"] / "clip_000.arsg")
    assert clip.gop == 4
    frames, _ = decode_clip(clip)
    assert frames.shape == (4, 1, 16, 16)
    stored = load_tensor(workspace["data"] / "clip_000" / "frame_0001.tnsr")
    np.testing.assert_array_equal(frames[1], stored)


def test_encode_rejects_bad_gop(workspace, tmp_path, capsys):
    code = main(["encode", "--in", str(workspace["data"] / "clip_000"),
                 "--out", str(tmp_path / "x.arsg"), "--gop", "0"])
    assert code == 2
    assert "gop" in capsys.readouterr().err


def test_train_hr_outputs(workspace):
    config, arrays = read_bundle(workspace["hr_ckpt"])
    assert config["alpha"] == 1.0
    assert all(a.dtype == np.float64 for a in arrays.values())
    history = (workspace["root"] / "hr_history.csv").read_text().splitlines()
    assert history[0] == "step,total,ce,aux"
    # 2 clips x 4 annotated frames x 2 epochs
    assert len(history) == 1 + 16


def test_train_lr_outputs(workspace):
    model, fusion = load_pipeline(workspace["lr_ckpt"])
    assert model.config.alpha == 0.5
    assert fusion.config.variant == "la"
    assert fusion.config.neighborhood == 3
    _, hr_arrays = read_bundle(workspace["hr_ckpt"])
    np.testing.assert_array_equal(model.params["final_w"].data,
                                  hr_arrays["final_w"])


def test_unknown_config_key_rejected(workspace, tmp_path, capsys):
    bad = dict(HR_CONFIG)
    bad["model"] = dict(bad["model"], depth=9)
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(bad))
    code = main(["train-hr", "--clip", str(workspace["clips"]),
                 "--labels", str(workspace["data"]), "--config", str(cfg),
                 "--out", str(tmp_path / "x.arwt")])
    assert code == 2
    assert "depth" in capsys.readouterr().err


def test_infer_writes_predictions(workspace, tmp_path):
    assert main(["infer", "--clip", str(workspace["clips"] / "clip_000.arsg"),
                 "--hr-ckpt", str(workspace["hr_ckpt"]),
                 "--lr-ckpt", str(workspace["lr_ckpt"]),
                 "--out", str(tmp_path)]) == 0
    pred = load_labels(tmp_path / "clip_000.pred.tnsr")
    assert pred.shape == (4, 16, 16)
    assert pred.min() >= 0 and pred.max() <= 2


def test_infer_fusion_override(workspace, tmp_path):
    assert main(["infer", "--clip", str(workspace["clips"] / "clip_000.arsg"),
                 "--hr-ckpt", str(workspace["hr_ckpt"]),
                 "--lr-ckpt", str(workspace["lr_ckpt"]),
                 "--fusion", "warp_only", "--out", str(tmp_path)]) == 0


def test_infer_override_needing_absent_weights_fails(workspace, tmp_path, capsys):
    code = main(["infer", "--clip", str(workspace["clips"] / "clip_000.arsg"),
                 "--hr-ckpt", str(workspace["hr_ckpt"]),
                 "--lr-ckpt", str(workspace["lr_ckpt"]),
                 "--fusion", "la_dense", "--out", str(tmp_path)])
    assert code == 2
    assert "la_dense" in capsys.readouterr().err


def test_eval_report_and_curve(workspace, tmp_path, capsys):
    report = tmp_path / "report.csv"
    curve = tmp_path / "curve.csv"
    for _ in range(2):
        assert main(["eval", "--clip", str(workspace["clips"]),
                     "--labels", str(workspace["data"]),
                     "--hr-ckpt", str(workspace["hr_ckpt"]),
                     "--lr-ckpt", str(workspace["lr_ckpt"]),
                     "--report", str(report),
                     "--append-curve", str(curve)]) == 0
    out = capsys.readouterr().out
    assert "overall" in out and "amortized" in out
    lines = report.read_text().splitlines()
    assert lines[0] == "d,miou_d,cells,skipped"
    assert [row.split(",")[0] for row in lines[1:5]] == ["0", "1", "2", "3"]
    assert any(row.startswith("ratio_to_hr,") for row in lines)
    assert len(curve.read_text().splitlines()) == 3  # header + 2 appends


def test_eval_gop_override(workspace, tmp_path):
    assert main(["eval", "--clip", str(workspace["clips"]),
                 "--labels", str(workspace["data"]),
                 "--hr-ckpt", str(workspace["hr_ckpt"]),
                 "--lr-ckpt", str(workspace["lr_ckpt"]),
                 "--gop", "2", "--report", str(tmp_path / "r.csv")]) == 0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert [row.split(",")[0] for row in lines[1:3]] == ["0", "1"]


def test_bd_compares_curves(tmp_path, capsys):
    anchor = tmp_path / "a.csv"
    test = tmp_path / "b.csv"
    save_curve(anchor, [RatePoint(100.0, 0.3), RatePoint(200.0, 0.5),
                        RatePoint(400.0, 0.7)])
    save_curve(test, [RatePoint(50.0, 0.3), RatePoint(100.0, 0.5),
                      RatePoint(200.0, 0.7)])
    assert main(["bd", "--anchor", str(anchor), "--test", str(test)]) == 0
    out = capsys.readouterr().out
    assert "bd_miou" in out and "bd_flops_percent" in out


def test_bd_rejects_single_point_curve(tmp_path, capsys):
    anchor = tmp_path / "a.csv"
    test = tmp_path / "b.csv"
    save_curve(anchor, [RatePoint(100.0, 0.3)])
    save_curve(test, [RatePoint(50.0, 0.3), RatePoint(100.0, 0.5)])
    assert main(["bd", "--anchor", str(anchor), "--test", str(test)]) == 2
    assert "anchor" in capsys.readouterr().err


def test_missing_input_is_exit_2(tmp_path, capsys):
    code = main(["encode", "--in", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "x.arsg"), "--gop", "2"])
    assert code == 2
    assert "nope" in capsys.readouterr().err


def test_divergence_is_exit_3(workspace, tmp_path, capsys):
    cfg = tmp_path / "hot.json"
    wild = dict(LR_CONFIG)
    wild["train"] = dict(wild["train"], lr=500.0, epochs=40)
    cfg.write_text(json.dumps(wild))
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["train-lr", "--clip", str(workspace["clips"]),
                     "--labels", str(workspace["data"]),
                     "--hr-ckpt", str(workspace["hr_ckpt"]),
                     "--config", str(cfg),
                     "--out", str(tmp_path / "x.arwt")])
    assert code == 3
    assert "not finite" in capsys.readouterr().err


def test_module_runs_as_script(tmp_path):
    result = subprocess.run(
        [sys.executable, "-m", "altseg.cli", "synth", "--out", str(tmp_path),
         "--clips", "1", "--frames", "2", "--height", "16", "--width", "16"],
        capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
    assert (tmp_path / "clip_000.labels.tnsr").exists()
