import json
import subprocess
import sys

import numpy as np
import pytest

from rdseg.cli import main
from rdseg.io import SampleRecord, load_manifest, read_mask, read_raster, save_manifest

EED_FAST = ["--steps", "2"]
SMALL = ["--levels", "2", "--base-channels", "2", "--patch-size", "16", "--epochs", "2", "--batch", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--count", "5", "--size", "32", "--lesions", "1..2",
                 "--seed", "1", "--test-count", "2"]) == 0
    for stage in ("lung", "infection"):
        assert main(["train", "--stage", stage, "--manifest", str(data / "manifest.json"),
                     "--out", str(root / f"{stage}.ckpt"), *SMALL, *EED_FAST]) == 0
    return root


def test_synth(workspace):
    m = load_manifest(workspace / "data" / "manifest.json")
    assert len(m.samples) == 5 and len(m.split("test").samples) == 2


def test_train_outputs(workspace):
    for stage in ("lung", "infection"):
        assert (workspace / f"{stage}.ckpt").read_bytes()[:8] == b"RDSN0001"
        log = (workspace / f"{stage}.ckpt.loss.tsv").read_text().splitlines()
        assert log[0] == "epoch\tmean_loss" and len(log) == 3


def test_eed(workspace, tmp_path):
    src = workspace / "data" / "phantom0000_image.imgf"
    assert main(["eed", "--in", str(src), "--out", str(tmp_path / "f.imgf"), "--steps", "5"]) == 0
    before, after = read_raster(src), read_raster(tmp_path / "f.imgf")
    assert after.shape == before.shape
    assert abs(float(after.mean()) - float(before.mean())) < 1e-5


def test_infer(workspace, tmp_path):
    out = tmp_path / "lung.pgm"
    assert main(["infer", "--stage", "lung", "--ckpt", str(workspace / "lung.ckpt"),
                 "--in", str(workspace / "data" / "phantom0003_image.imgf"), "--out", str(out)]) == 0
    assert read_mask(out).shape == (32, 32)


def test_pipeline_and_eval(workspace, tmp_path):
    gt = load_manifest(workspace / "data" / "manifest.json")
    preds = []
    for s in gt.split("test").samples:
        prefix = tmp_path / s.id
        assert main(["pipeline", "--lung-ckpt", str(workspace / "lung.ckpt"),
                     "--infection-ckpt", str(workspace / "infection.ckpt"),
                     "--in", str(gt.resolve(s.image_path)), "--out-prefix", str(prefix),
                     "--overlay", *EED_FAST]) == 0
        lung, inf = read_mask(f"{prefix}_lung.pgm"), read_mask(f"{prefix}_infection.pgm")
        assert not np.any(inf & ~lung)
        assert (tmp_path / f"{s.id}_overlay.ppm").read_bytes()[:2] == b"P6"
        preds.append(SampleRecord(s.id, str(gt.resolve(s.image_path)), f"{s.id}_lung.pgm",
                                  f"{s.id}_infection.pgm", "test"))
    save_manifest(tmp_path / "pred.json", preds)
    gt_test = tmp_path / "gt.json"
    save_manifest(gt_test, [
        SampleRecord(s.id, str(gt.resolve(s.image_path)), str(gt.resolve(s.lung_mask_path)),
                     str(gt.resolve(s.infection_mask_path)), "test")
        for s in gt.split("test").samples
    ])
    report = tmp_path / "report.json"
    assert main(["eval", "--pred-manifest", str(tmp_path / "pred.json"), "--gt-manifest", str(gt_test),
                 "--out", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert set(doc) == {"lung", "infection"}
    assert doc["lung"]["aggregate"]["dsc"]["count"] == 2
    table = (tmp_path / "report.json.tsv").read_text().splitlines()
    assert table[0] == "Task\tDSC\tSensitivity\tSpecificity"
    assert [row.split("\t")[0] for row in table[1:]] == ["Lung", "Infection"]


def test_errors_are_one_line(tmp_path, capsys):
    assert main(["infer", "--stage", "lung", "--ckpt", str(tmp_path / "missing.ckpt"),
                 "--in", "x", "--out", "y"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("rdseg infer:") and err.count("\n") == 1


def test_bad_eed_parameter(tmp_path, capsys):
    assert main(["eed", "--in", "x", "--out", "y", "--tau", "0.5"]) == 1
    assert "tau" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "rdseg", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("synth", "eed", "train", "infer", "pipeline", "eval"):
        assert cmd in out.stdout
