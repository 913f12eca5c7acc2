import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import taggan.cli as cli
from taggan.cli import main, resolve_options, build_parser
from taggan.core import normalize_image
from taggan.data import load_manifest, read_png, write_png
from taggan.metrics import rasterize_boxes
from taggan.tagging import ConstraintConfig, tag_image
from taggan.trainer import DivergenceError, TrainConfig, iterations_per_epoch, load_checkpoint

SYNTH = ["--n-normal", "5", "--n-abnormal", "5", "--image-size", "32",
         "--min-lesion-radius", "2", "--max-lesion-radius", "4", "--seed", "7"]
TINY = ["--epochs", "1", "--base-channels", "2", "--n-residual-blocks", "1", "--patience", "0"]


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), *SYNTH]) == 0
    assert main(["train", "--manifest", str(root / "data" / "manifest.csv"), "--out", str(root / "model"), *TINY]) == 0
    return root


# ---------------------------------------------------------------- synth

def test_synth_manifest_rows(workspace):
    with open(workspace / "data" / "manifest.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 10


def test_synth_idempotent(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), *SYNTH]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *SYNTH]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_synth_missing_out(capsys):
    assert main(["synth", "--n-normal", "2"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "--out" in err


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--n-normal", "many"])
    assert exc.value.code == 2


def test_config_file_equals_flags(tmp_path):
    cfg = {"n_normal": 5, "n_abnormal": 5, "image_size": 32, "min_lesion_radius": 2,
           "max_lesion_radius": 4, "seed": 7, "out": str(tmp_path / "viaconfig")}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(tmp_path / "c.json")]) == 0
    assert main(["synth", "--out", str(tmp_path / "viaflags"), *SYNTH]) == 0
    assert tree_hash(tmp_path / "viaconfig") == tree_hash(tmp_path / "viaflags")


def test_flags_override_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 7, "learning_rate": 0.5}))
    ns = build_parser().parse_args(["train", "--config", str(tmp_path / "c.json"), "--epochs", "3",
                                    "--manifest", "m.csv", "--out", "o"])
    opts = resolve_options("train", ns)
    assert opts["epochs"] == 3 and opts["learning_rate"] == 0.5


def test_config_unknown_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"n_normals": 5}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "x")]) == 2
    assert "n_normals" in capsys.readouterr().err


def test_config_bad_type(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"n_normal": "five"}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "x")]) == 2


def test_invalid_phantom_config_exit_2(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "x"), "--image-size", "30"]) == 2


# ---------------------------------------------------------------- train

def test_train_defaults_match_trainconfig():
    ns = build_parser().parse_args(["train", "--manifest", "m.csv", "--out", "o"])
    cfg = cli.train_config(resolve_options("train", ns), 64)
    assert cfg == TrainConfig()


def test_train_epochs_zero(workspace, tmp_path):
    out = tmp_path / "m0"
    argv = ["train", "--manifest", str(workspace / "data" / "manifest.csv"), "--out", str(out), *TINY]
    argv[argv.index("--epochs") + 1] = "0"
    assert main(argv) == 0
    ck = load_checkpoint(out / "model.ckpt")
    assert ck.epoch == 0 and ck.iteration == 0


def test_train_log_rows(workspace):
    ck = load_checkpoint(workspace / "model" / "model.ckpt")
    ds = load_manifest(workspace / "data" / "manifest.csv")
    with open(workspace / "model" / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == ck.iteration == iterations_per_epoch(ck.config, ds)


def test_train_divergence_exit_3(workspace, tmp_path, monkeypatch, capsys):
    def boom(*a, **kw):
        raise DivergenceError("l_cyc")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--manifest", str(workspace / "data" / "manifest.csv"), "--out", str(tmp_path)]) == 3
    assert "l_cyc" in capsys.readouterr().err


def test_train_missing_manifest(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1


# ---------------------------------------------------------------- tag

def test_tag_single_image(workspace, tmp_path):
    img = workspace / "data" / "images" / "abnormal_00001.png"
    out = tmp_path / "single"
    assert main(["tag", "--checkpoint", str(workspace / "model" / "model.ckpt"), "--input", str(img),
                 "--label", "1", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["boxes.csv", "counterfactual.png", "map.png", "mask.png", "sidecar.json"]

    side = json.loads((out / "sidecar.json").read_text())
    ck = load_checkpoint(workspace / "model" / "model.ckpt")
    res = tag_image(ck, normalize_image(read_png(img)), 1, ConstraintConfig.for_size(32), "abnormal_00001")
    assert side["threshold"] == res.threshold.threshold
    assert side["n_boxes_unequal"] == len(res.boxes_unequal)
    assert np.array_equal(read_png(out / "mask.png") > 0, res.mask > 0)


def test_tag_directory_layout(workspace, tmp_path):
    out = tmp_path / "dir"
    assert main(["tag", "--checkpoint", str(workspace / "model" / "model.ckpt"),
                 "--input", str(workspace / "data" / "images"), "--label", "0", "--out", str(out)]) == 0
    subdirs = sorted(p.name for p in out.iterdir())
    assert subdirs == sorted(p.stem for p in (workspace / "data" / "images").glob("*.png"))
    assert all((out / d / "sidecar.json").is_file() for d in subdirs)


def test_tag_label_out_of_range(workspace, tmp_path):
    assert main(["tag", "--checkpoint", str(workspace / "model" / "model.ckpt"),
                 "--input", str(workspace / "data" / "images"), "--label", "3", "--out", str(tmp_path)]) == 2


def test_tag_idempotent(workspace, tmp_path):
    for name in ("a", "b"):
        assert main(["tag", "--checkpoint", str(workspace / "model" / "model.ckpt"),
                     "--input", str(workspace / "data" / "images"), "--label", "2", "--out", str(tmp_path / name)]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


# ---------------------------------------------------------------- eval

def test_eval_self(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "model" / "model.ckpt"),
                 "--manifest", str(workspace / "data" / "manifest.csv"), "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split()[0] for l in lines[1:]] == ["equal", "unequal"]

    summary = json.loads((tmp_path / "eval_summary.json").read_text())
    with open(tmp_path / "eval_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    for mode in ("equal", "unequal"):
        vals = [float(r["poi"]) for r in rows if r["mode"] == mode]
        assert summary["modes"][mode]["mean_poi"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
        ious = [float(r["iou"]) for r in rows if r["mode"] == mode]
        assert summary["modes"][mode]["mean_iou"] == pytest.approx(sum(ious) / len(ious), abs=1e-12)


def test_eval_external_gt_as_predictions(workspace, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    for s in load_manifest(workspace / "data" / "manifest.csv"):
        if s.abnormal:
            write_png(pred / f"{s.id}.png", rasterize_boxes(s.gt_boxes, s.image.shape).astype(np.uint8) * 255)
    assert main(["eval", "--external", str(pred), "--manifest", str(workspace / "data" / "manifest.csv"),
                 "--out", str(tmp_path / "rep")]) == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    assert all(float(r.split()[1]) == 100.0 for r in rows)


def test_eval_without_ground_truth(workspace, tmp_path):
    manifest = workspace / "data" / "manifest.csv"
    lines = manifest.read_text().splitlines()
    normal_only = tmp_path / "normal.csv"
    normal_only.write_text("\n".join([lines[0]] + [l for l in lines[1:] if ",normal," in l]) + "\n")
    for sub in ("images", "masks"):
        (tmp_path / sub).symlink_to(workspace / "data" / sub)
    assert main(["eval", "--checkpoint", str(workspace / "model" / "model.ckpt"),
                 "--manifest", str(normal_only), "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------- report

def test_report_grid(workspace, tmp_path):
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    for name in ["abnormal_00000", "abnormal_00001", "normal_00000", "normal_00001"]:
        (inputs / f"{name}.png").write_bytes((workspace / "data" / "images" / f"{name}.png").read_bytes())
    ck = str(workspace / "model" / "model.ckpt")
    assert main(["tag", "--checkpoint", ck, "--input", str(inputs), "--label", "0", "--out", str(tmp_path / "t")]) == 0
    paths = []
    for name in ("r1", "r2"):
        assert main(["report", "--tags", str(tmp_path / "t"), "--manifest", str(workspace / "data" / "manifest.csv"),
                     "--out", str(tmp_path / name)]) == 0
        paths.append(tmp_path / name / "report.png")
    assert paths[0].read_bytes() == paths[1].read_bytes()
    w, h = Image.open(paths[0]).size
    assert (h, w) == (4 * (32 + cli.PAD) + cli.PAD, 6 * (32 + cli.PAD) + cli.PAD)


def test_report_missing_artifact(workspace, tmp_path):
    ck = str(workspace / "model" / "model.ckpt")
    img = str(workspace / "data" / "images" / "abnormal_00000.png")
    assert main(["tag", "--checkpoint", ck, "--input", img, "--label", "0", "--out", str(tmp_path / "t")]) == 0
    (tmp_path / "t" / "map.png").unlink()
    assert main(["report", "--tags", str(tmp_path / "t"), "--out", str(tmp_path / "r")]) == 1


def test_report_blank_row_for_blank_mask():
    img = np.full((16, 16), 100, dtype=np.uint8)
    blank_map = np.full((16, 16), 128, dtype=np.uint8)
    row = cli.report_row(img, blank_map, np.zeros((16, 16), np.uint8), [], [])
    assert len(row) == 6
    assert row[3].max() == 0
    assert np.all(row[2] >= 253)
