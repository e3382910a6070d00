"""Command-line interface: parsing, exit codes, the full subcommand
pipeline on a tiny dataset, overlay rendering, and the no-depth audit."""

import builtins
import csv
import glob
import json
import os

import numpy as np
import pytest
from PIL import Image

from cgldetect.cli import (CliError, CliInvocation, _component_flags,
                           ablation_rows, cmd_infer_overlay, main,
                           parse_invocation, read_history_csv, render_overlay)
from cgldetect.data import load_coco_annotations, scene_target_mask
from cgldetect.metrics import predict_mask
from cgldetect.model import CglModel, EncoderConfig, load_checkpoint, save_checkpoint
from cgldetect.pgt import PgtConfig, generate_pgt
from cgldetect.train import HISTORY_COLUMNS, TrainConfig, write_train_config
from cgldetect.losses import LossWeights


# ---------------------------------------------------------------------------
# parsing and exit codes

def test_parse_invocation_collects_options(tmp_path):
    inv = parse_invocation(["synth", "--out", str(tmp_path / "d"),
                            "--count", "12", "--seed", "5", "--size", "32"])
    assert inv.subcommand == "synth"
    assert inv.output == str(tmp_path / "d")
    assert inv.seed == 5
    assert inv.options["count"] == 12
    assert inv.options["size"] == 32
    assert inv.options["split"] == "disjoint-locations"
    assert inv.inputs == ()


def test_usage_errors_exit_with_status_two(capsys):
    with pytest.raises(SystemExit) as exc:
        parse_invocation([])
    assert exc.value.code == 2
    assert "subcommand is required" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        parse_invocation(["synth", "--bogus"])
    assert exc.value.code == 2


def test_missing_input_is_a_runtime_error(capsys):
    with pytest.raises(CliError, match="missing input path: nope.cfg"):
        parse_invocation(["train", "--config", "nope.cfg",
                          "--data", "also-missing.json", "--out", "o"])
    assert main(["train", "--config", "nope.cfg", "--data", "x.json",
                 "--out", "o"]) == 1
    assert "missing input path: nope.cfg" in capsys.readouterr().err


def test_invocation_rejects_unknown_subcommand():
    with pytest.raises(ValueError, match="subcommand must be one of"):
        CliInvocation(subcommand="frobnicate")


def test_seed_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("CGLDETECT_SEED", "9")
    inv = parse_invocation(["synth", "--out", str(tmp_path)])
    assert inv.seed == 9
    inv = parse_invocation(["synth", "--out", str(tmp_path), "--seed", "3"])
    assert inv.seed == 3  # the flag wins
    monkeypatch.setenv("CGLDETECT_SEED", "not-a-number")
    with pytest.raises(CliError, match="CGLDETECT_SEED must be an integer"):
        parse_invocation(["synth", "--out", str(tmp_path)])


# ---------------------------------------------------------------------------
# the whole pipeline, end to end, on a tiny dataset

def test_subcommand_pipeline(tmp_path):
    data_dir = tmp_path / "data"
    assert main(["synth", "--out", str(data_dir), "--count", "8",
                 "--seed", "1", "--size", "32"]) == 0
    ann = data_dir / "annotations.json"
    assert ann.exists()
    with open(ann) as fh:
        assert len(json.load(fh)["images"]) == 8

    # pseudo-label masks: one 1-bit PNG per scene, matching the library
    masks = tmp_path / "masks"
    assert main(["pgt", "--data", str(ann), "--out", str(masks)]) == 0
    mask_files = sorted(glob.glob(str(masks / "*_pgt.png")))
    assert len(mask_files) == 8
    scenes = load_coco_annotations(ann)
    with Image.open(mask_files[0]) as img:
        assert img.mode == "1"
        stored = np.asarray(img).astype(np.uint8)
    want = generate_pgt(scenes[0].depth, scene_target_mask(scenes[0]),
                        PgtConfig())
    assert np.array_equal(stored, want)

    # training: short full-objective run
    cfg_path = tmp_path / "run.cfg"
    write_train_config(cfg_path, TrainConfig(
        epochs=2, batch_size=4, lr=0.05, seed=3,
        weights=LossWeights(1.0, 1.0, 0.1, 0.1),
        encoder=EncoderConfig(d=8, depth_of_stack=1, seed=3)))
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--data", str(ann),
                 "--out", str(run_dir),
                 "--cache-dir", str(tmp_path / "cache")]) == 0
    for artifact in ("history.csv", "run.cfg", "last.cglm", "best.cglm"):
        assert (run_dir / artifact).exists(), artifact
    history = read_history_csv(run_dir / "history.csv")
    assert [r["epoch"] for r in history] == [0, 1]

    # evaluation: split-grouped CSV report, byte-stable across reruns
    report_csv = tmp_path / "report.csv"
    assert main(["eval", "--model", str(run_dir / "best.cglm"),
                 "--data", str(ann), "--out", str(report_csv)]) == 0
    with open(report_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["split"] for r in rows} == {"train", "test"}
    first_bytes = report_csv.read_bytes()
    assert main(["eval", "--model", str(run_dir / "best.cglm"),
                 "--data", str(ann), "--out", str(report_csv)]) == 0
    assert report_csv.read_bytes() == first_bytes
    assert main(["eval", "--model", str(run_dir / "best.cglm"),
                 "--data", str(ann), "--split", "bogus"]) == 1

    # inference: overlay plus raw quarter-resolution mask
    image_path = str(data_dir / "images" /
                     os.path.basename(scenes[0].name))
    overlay_path = tmp_path / "out" / "overlay.png"
    assert main(["infer", "--model", str(run_dir / "best.cglm"),
                 "--image", image_path, "--out", str(overlay_path)]) == 0
    mask_path = tmp_path / "out" / "overlay_mask.png"
    assert overlay_path.exists() and mask_path.exists()
    with Image.open(mask_path) as img:
        assert img.mode == "1" and img.size == (8, 8)
        mask = np.asarray(img).astype(np.uint8)
    model, _, _ = load_checkpoint(run_dir / "best.cglm")
    assert np.array_equal(mask, predict_mask(model, scenes[0]))
    with Image.open(overlay_path) as img:
        overlay = np.asarray(img.convert("RGB"))
    want_overlay, full = render_overlay(scenes[0].image, mask)
    assert np.array_equal(overlay, want_overlay)
    assert int(full.sum()) == 16 * int(mask.sum())

    # report: loss and IoU curves for the run
    plots = tmp_path / "plots"
    assert main(["report", str(run_dir / "history.csv"),
                 "--out", str(plots)]) == 0
    assert (plots / "run_loss.png").exists()   # label from the run directory
    assert (plots / "run_iou.png").exists()
    assert not (plots / "ablation.csv").exists()


# ---------------------------------------------------------------------------
# overlay rendering

def test_overlay_marks_exactly_the_upsampled_mask(rng):
    image = rng.integers(10, 240, size=(16, 16, 3)).astype(np.uint8)
    mask = rng.integers(0, 2, size=(4, 4)).astype(np.uint8)
    mask[0, 0] = 1
    overlay, full = render_overlay(image, mask)
    assert full.sum() == 16 * mask.sum()
    changed = (overlay != image).any(axis=2)
    outline = changed & ~full
    # flagged pixels: alpha blend toward red, rounded
    want = np.rint(0.5 * image[full].astype(np.float64)
                   + 0.5 * np.array([255.0, 0.0, 0.0])).astype(np.uint8)
    assert np.array_equal(overlay[full], want)
    # every flagged pixel visibly differs from the input (green halves)
    assert changed[full].all()
    # outline pixels are pure green and sit outside the mask
    assert (overlay[outline] == (0, 255, 0)).all()
    assert not (outline & full).any()
    # everything else is untouched
    rest = ~(full | outline)
    assert np.array_equal(overlay[rest], image[rest])


def test_overlay_with_empty_mask_is_the_input_image(rng):
    image = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
    overlay, full = render_overlay(image, np.zeros((2, 2), dtype=np.uint8))
    assert np.array_equal(overlay, image)
    assert full.sum() == 0


def test_overlay_rejects_mismatched_mask(rng):
    image = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
    with pytest.raises(ValueError, match="does not upsample"):
        render_overlay(image, np.zeros((3, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# inference reads no depth data

def test_infer_never_opens_depth_files(tmp_path, monkeypatch, rng):
    image = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    image_path = tmp_path / "scene.png"
    Image.fromarray(image).save(image_path)
    model_path = tmp_path / "model.cglm"
    save_checkpoint(model_path, CglModel(EncoderConfig(d=8, depth_of_stack=1)))
    # decoys an undisciplined implementation might reach for
    (tmp_path / "scene_depth.cgld").write_bytes(b"CGLD decoy")
    (tmp_path / "depth.png").write_bytes(b"decoy")

    opened = []
    real_open = builtins.open

    def recording_open(file, *args, **kwargs):
        opened.append(os.fspath(file) if not isinstance(file, int) else "<fd>")
        return real_open(file, *args, **kwargs)

    monkeypatch.setattr(builtins, "open", recording_open)
    cmd_infer_overlay(model_path, image_path, tmp_path / "overlay.png")

    assert any(p.endswith("scene.png") for p in opened)       # audit works
    assert any(p.endswith("model.cglm") for p in opened)
    for path in opened:
        low = os.path.basename(path).lower()
        assert "depth" not in low and not low.endswith(".cgld"), path


def test_infer_rejects_indivisible_image(tmp_path, rng):
    image = rng.integers(0, 256, size=(30, 32, 3)).astype(np.uint8)
    image_path = tmp_path / "odd.png"
    Image.fromarray(image).save(image_path)
    model_path = tmp_path / "model.cglm"
    save_checkpoint(model_path, CglModel(EncoderConfig(d=8, depth_of_stack=1)))
    with pytest.raises(CliError, match="divisible"):
        cmd_infer_overlay(model_path, image_path, tmp_path / "overlay.png")


# ---------------------------------------------------------------------------
# history files and the ablation table

def history_rows(n, l_dflb=0.1, l_gte=0.0, l_ivr=0.02):
    return [{"epoch": e, "l_cgl": 0.5 / (e + 1), "l_dflb": l_dflb,
             "l_gte": l_gte, "l_ivr": l_ivr, "total": 1.0 / (e + 1),
             "miou": 0.5 + 0.1 * e, "cgl_iou": 0.4 + 0.1 * e}
            for e in range(n)]


def write_history(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def test_read_history_round_trip(tmp_path):
    rows = history_rows(3)
    path = tmp_path / "history.csv"
    write_history(path, rows)
    assert read_history_csv(path) == rows


def test_read_history_error_cases(tmp_path):
    path = tmp_path / "history.csv"
    path.write_text("epoch,l_cgl\n0,0.5\n")
    with pytest.raises(CliError, match="missing history columns"):
        read_history_csv(path)
    write_history(path, [])
    with pytest.raises(CliError, match="history is empty"):
        read_history_csv(path)
    path.write_text(",".join(HISTORY_COLUMNS) + "\n0,0.5,oops,0,0,1,0.5,0.4\n")
    with pytest.raises(CliError, match="malformed row 1"):
        read_history_csv(path)


def test_component_flags_and_ablation_table(tmp_path):
    full = history_rows(2, l_dflb=0.3, l_gte=0.05, l_ivr=0.01)
    base = history_rows(2, l_dflb=0.0, l_gte=0.0, l_ivr=0.0)
    assert _component_flags(full) == {"l_dflb": True, "l_gte": True,
                                      "l_ivr": True}
    assert _component_flags(base) == {"l_dflb": False, "l_gte": False,
                                      "l_ivr": False}
    table = ablation_rows([full, base], ["full", "base"])
    assert table[0]["dflb"] == "on" and table[1]["dflb"] == "off"
    assert table[0]["cgl_iou"] == full[-1]["cgl_iou"]

    # a two-run report also renders the comparison table
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    write_history(a / "history.csv", full)
    write_history(b / "history.csv", base)
    out = tmp_path / "plots"
    assert main(["report", str(a / "history.csv"), str(b / "history.csv"),
                 "--out", str(out), "--labels", "full,base",
                 "--format", "svg"]) == 0
    assert (out / "full_loss.svg").exists() and (out / "base_iou.svg").exists()
    with open(out / "ablation.csv", newline="") as fh:
        got = list(csv.DictReader(fh))
    assert [r["run"] for r in got] == ["full", "base"]
    assert got[0]["gte"] == "on" and got[1]["ivr"] == "off"
    assert float(got[1]["miou"]) == base[-1]["miou"]
    assert (out / "ablation.svg").exists()
