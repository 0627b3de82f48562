import csv

import numpy as np
import pytest
from scipy import ndimage

from nexusseg.cli import main
from nexusseg.data import read_volume, write_label_map
from nexusseg.models import check_dims, load_checkpoint

TINY_CFG = """# tiny run
phase1_patch_count = 200
phase1_epochs = 1
phase2_patch_count = 100
phase2_epochs = 1
val_patch_count = 50
batch_size = 50
model_width = 4
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--count", "3", "--size", "4,36,36", "--seed", "1"]) == 0
    assert main(["synth", "--out", str(root / "free"), "--count", "1", "--size", "4,36,36", "--tumor-free"]) == 0
    (root / "tiny.cfg").write_text(TINY_CFG)
    rc = main(["train", "--arch", "ILinear", "--data", str(root / "data"), "--config", str(root / "tiny.cfg"),
               "--out", str(root / "m.nxck")])
    assert rc == 0
    return root


def test_synth(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--count", "1", "--size", "6,32,32", "--tumor-free"]) == 0
    vol = read_volume(tmp_path / "a" / "phantom_000.nxv")
    assert np.bincount(vol.labels.ravel(), minlength=5).tolist() == [vol.labels.size, 0, 0, 0, 0]
    assert main(["synth", "--out", str(tmp_path / "b"), "--count", "3", "--size", "6,32,32", "--seed", "5"]) == 0
    assert main(["synth", "--out", str(tmp_path / "c"), "--count", "3", "--size", "6,32,32", "--seed", "5"]) == 0
    with open(tmp_path / "b" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and len({r["seed"] for r in rows}) == 3
    for r in rows:
        assert (tmp_path / "b" / r["file"]).read_bytes() == (tmp_path / "c" / r["file"]).read_bytes()


def test_synth_unwritable(tmp_path):
    (tmp_path / "file").write_text("x")
    assert main(["synth", "--out", str(tmp_path / "file" / "sub"), "--count", "1", "--size", "4,20,20"]) == 2


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--arch", "Foo", "--data", str(tmp_path), "--out", "x"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["fly"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out", "x", "--size", "1,2"])
    assert e.value.code == 2


def test_train_dry_run_scales_counts(tmp_path, capsys):
    assert main(["train", "--arch", "LN", "--data", str(tmp_path), "--out", "x", "--desk-scale", "0.05", "--dry-run"]) == 0
    assert "phase 1 patches 10000, phase 2 patches 1500" in capsys.readouterr().out


def test_train_outputs(trained):
    model = load_checkpoint(trained / "m.nxck")
    assert model.name == "ILinear"
    check_dims(model)
    lines = (trained / "m.nxck.log.csv").read_text().splitlines()
    assert lines[0] == "phase,epoch,train_loss,val_loss,lr,seconds" and len(lines) == 3


def test_train_missing_labels(tmp_path):
    write_label_map(tmp_path / "a.nxv", np.zeros((2, 4, 4), np.uint8))
    write_label_map(tmp_path / "b.nxv", np.zeros((2, 4, 4), np.uint8))
    assert main(["train", "--arch", "LN", "--data", str(tmp_path), "--out", str(tmp_path / "m")]) == 3


def test_segment_and_evaluate(trained, tmp_path, capsys):
    src = trained / "data" / "phantom_000.nxv"
    out, raw = tmp_path / "seg.nxv", tmp_path / "raw.nxv"
    assert main(["segment", "--ckpt", str(trained / "m.nxck"), "--in", str(src), "--out", str(out),
                 "--overlay", str(tmp_path / "ov")]) == 0
    assert main(["segment", "--ckpt", str(trained / "m.nxck"), "--in", str(src), "--out", str(raw), "--no-postproc"]) == 0
    a, b = read_volume(out).labels, read_volume(raw).labels
    assert a.shape == read_volume(src).shape
    near = np.stack([ndimage.binary_dilation(s > 0, np.ones((3, 3), bool)) for s in b])
    assert not (a != b)[~near].any()
    assert len(list((tmp_path / "ov").iterdir())) == a.shape[0]

    truth = str(src)
    assert main(["evaluate", "--pred", truth, "--truth", truth, "--out", str(tmp_path / "same.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "same.csv")))
    assert all(float(r[m]) == 1.0 for r in rows for m in ("dice", "sensitivity", "specificity"))
    assert main(["evaluate", "--pred", str(out), "--truth", truth, "--out", str(tmp_path / "ab.csv")]) == 0
    assert main(["evaluate", "--pred", truth, "--truth", str(out), "--out", str(tmp_path / "ba.csv")]) == 0
    ab = {r["region"]: r for r in csv.DictReader(open(tmp_path / "ab.csv"))}
    ba = {r["region"]: r for r in csv.DictReader(open(tmp_path / "ba.csv"))}
    assert all(ab[k]["dice"] == ba[k]["dice"] for k in ab)


def test_segment_tumor_free_and_mismatch(trained, tmp_path, capsys):
    free = trained / "free" / "phantom_000.nxv"
    assert main(["segment", "--ckpt", str(trained / "m.nxck"), "--in", str(free), "--out", str(tmp_path / "f.nxv")]) == 0
    assert "tumour voxels" in capsys.readouterr().out
    write_label_map(tmp_path / "labels_only.nxv", np.zeros((2, 4, 4), np.uint8))
    assert main(["segment", "--ckpt", str(trained / "m.nxck"), "--in", str(tmp_path / "labels_only.nxv"),
                 "--out", str(tmp_path / "x.nxv")]) == 3
    assert main(["segment", "--ckpt", str(free), "--in", str(free), "--out", str(tmp_path / "x.nxv")]) == 3


def test_evaluate_directories_and_mismatch(tmp_path):
    pred, truth = tmp_path / "p", tmp_path / "t"
    pred.mkdir()
    truth.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        lab = rng.integers(0, 5, (2, 6, 6)).astype(np.uint8)
        write_label_map(truth / f"v{i}.nxv", lab)
        write_label_map(pred / f"v{i}.nxv", np.roll(lab, 1, axis=2))
    assert main(["evaluate", "--pred", str(pred), "--truth", str(truth), "--out", str(tmp_path / "r.csv"),
                 "--workers", "2"]) == 0
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert len(rows) == 1 + 3 * 3 + 2 * 3
    assert [r[0] for r in rows[-6:]] == ["<mean>"] * 3 + ["<median>"] * 3
    write_label_map(tmp_path / "small.nxv", np.zeros((2, 5, 6), np.uint8))
    assert main(["evaluate", "--pred", str(tmp_path / "small.nxv"), "--truth", str(truth / "v0.nxv"),
                 "--out", str(tmp_path / "bad.csv")]) == 3


def test_check_verb(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS check_dims") >= 5 and "FAIL" not in out
