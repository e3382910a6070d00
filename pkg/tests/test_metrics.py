"""IoU metric: brute-force parity, exact reference values, pooling."""

import csv

import numpy as np
import pytest
from oracles import naive_iou, naive_iou_counts

from cgldetect.data import (CglBox, boxes_to_mask, scene_target_mask,
                            synthesize_dataset)
from cgldetect.metrics import (IouReport, detections_to_mask, evaluate,
                               format_report, iou_per_class, predict_mask,
                               write_report_csv)
from cgldetect.model import CglModel, EncoderConfig


def test_counts_match_brute_force(rng):
    for _ in range(10):
        h, w = int(rng.integers(3, 12)), int(rng.integers(3, 12))
        pred = rng.integers(0, 2, size=(h, w)).astype(np.uint8)
        gt = rng.integers(0, 2, size=(h, w)).astype(np.uint8)
        rep = iou_per_class(pred, gt)
        tallies = naive_iou_counts(pred, gt)
        assert (rep.tp_cgl, rep.fp_cgl, rep.fn_cgl) == tallies[1]
        assert (rep.tp_background, rep.fp_background,
                rep.fn_background) == tallies[0]
        assert rep.iou_cgl == naive_iou(*tallies[1])
        assert rep.iou_background == naive_iou(*tallies[0])


def test_all_ones_prediction_against_ten_percent_target():
    pred = np.ones((10, 10), dtype=np.uint8)
    gt = np.zeros((10, 10), dtype=np.uint8)
    gt[0, :10] = 1  # exactly 10 of 100 pixels
    rep = iou_per_class(pred, gt)
    assert rep.iou_cgl == 0.10
    assert rep.iou_background == 0.0
    assert rep.miou == 0.05


def test_empty_union_scores_one():
    zeros = np.zeros((4, 4), dtype=np.uint8)
    rep = iou_per_class(zeros, zeros)
    assert rep.iou_cgl == 1.0 and rep.iou_background == 1.0 and rep.miou == 1.0
    # vacuous only for the class with no pixels on either side
    ones = np.ones((4, 4), dtype=np.uint8)
    assert iou_per_class(ones, ones).iou_cgl == 1.0


def test_swap_symmetry(rng):
    pred = rng.integers(0, 2, size=(9, 7)).astype(np.uint8)
    gt = rng.integers(0, 2, size=(9, 7)).astype(np.uint8)
    a, b = iou_per_class(pred, gt), iou_per_class(gt, pred)
    assert a.iou_cgl == b.iou_cgl
    assert a.iou_background == b.iou_background
    assert a.miou == b.miou


def test_false_positives_never_raise_cgl_iou(rng):
    gt = rng.integers(0, 2, size=(8, 8)).astype(np.uint8)
    pred = gt.copy()
    score = iou_per_class(pred, gt).iou_cgl
    background = np.argwhere(gt == 0)
    rng.shuffle(background)
    for y, x in background[:10]:
        pred[y, x] = 1
        nxt = iou_per_class(pred, gt).iou_cgl
        assert nxt <= score
        score = nxt


def test_dataset_pooling_differs_from_mean_of_images():
    # one image nails a tiny target, the other misses a huge one; count
    # pooling weighs them by pixels, a per-image mean would not
    gt1 = np.zeros((4, 4), dtype=np.uint8)
    gt1[0, 0] = 1
    pred1 = gt1.copy()
    gt2 = np.ones((4, 4), dtype=np.uint8)
    pred2 = np.zeros((4, 4), dtype=np.uint8)
    r1, r2 = iou_per_class(pred1, gt1), iou_per_class(pred2, gt2)
    pooled = r1 + r2
    assert pooled.tp_cgl == 1 and pooled.fn_cgl == 16
    assert pooled.iou_cgl == 1 / 17
    assert (r1.iou_cgl + r2.iou_cgl) / 2 == 0.5  # != pooled


def test_pooling_is_associative_and_matches_flat_count(rng):
    reps = []
    flat_pred, flat_gt = [], []
    for _ in range(4):
        pred = rng.integers(0, 2, size=(5, 5)).astype(np.uint8)
        gt = rng.integers(0, 2, size=(5, 5)).astype(np.uint8)
        reps.append(iou_per_class(pred, gt))
        flat_pred.append(pred.ravel())
        flat_gt.append(gt.ravel())
    left = ((reps[0] + reps[1]) + reps[2]) + reps[3]
    right = reps[0] + (reps[1] + (reps[2] + reps[3]))
    assert left == right
    flat = iou_per_class(np.concatenate(flat_pred)[None],
                         np.concatenate(flat_gt)[None])
    assert left == flat


def test_validation():
    with pytest.raises(ValueError, match="shape mismatch"):
        iou_per_class(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="pred mask must be binary"):
        iou_per_class(np.full((2, 2), 2), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="gt mask must be binary"):
        iou_per_class(np.zeros((2, 2)), np.full((2, 2), 0.5))


# ---------------------------------------------------------------------------
# detector boxes

def test_detections_match_direct_rasterization():
    boxes = [CglBox(4, 8, 6, 10), CglBox(20, 0, 5, 5)]
    got = detections_to_mask(boxes, 32, 32)
    assert np.array_equal(got, boxes_to_mask(boxes, 32, 32, 4))


def test_detections_clip_and_drop(caplog):
    inside = CglBox(0, 0, 4, 4)
    spilling = CglBox(28, 28, 10, 10)   # clipped to 4x4 corner
    outside = CglBox(40, 40, 4, 4)      # dropped entirely
    with caplog.at_level("WARNING", logger="cgldetect.metrics"):
        got = detections_to_mask([inside, spilling, outside], 32, 32)
    assert "clipped" in caplog.text
    want = boxes_to_mask([inside, CglBox(28, 28, 4, 4)], 32, 32, 4)
    assert np.array_equal(got, want)


# ---------------------------------------------------------------------------
# model evaluation and reports

def small_model():
    return CglModel(EncoderConfig(d=8, depth_of_stack=1, seed=5))


def test_evaluate_pools_per_image_counts():
    scenes = synthesize_dataset(3, seed=21, size=32)
    model = small_model()
    total, per_image = evaluate(model, scenes, split="train")
    assert len(per_image) == 3
    assert [name for name, _ in per_image] == [s.name for s in scenes]
    summed = IouReport()
    for _, rep in per_image:
        summed = summed + rep
    assert total == summed
    # per-image reports agree with a direct prediction
    name0, rep0 = per_image[0]
    direct = iou_per_class(predict_mask(model, scenes[0]),
                           scene_target_mask(scenes[0]))
    assert rep0 == direct


def test_evaluate_rejects_empty_split():
    with pytest.raises(ValueError, match="empty split"):
        evaluate(small_model(), [])


def test_report_csv_round_trip(tmp_path):
    rows = [("train", IouReport(5, 2, 1, 80, 1, 2)),
            ("test", IouReport(0, 0, 0, 16, 0, 0))]
    path = tmp_path / "report.csv"
    write_report_csv(path, rows)
    with open(path, newline="") as fh:
        got = list(csv.DictReader(fh))
    assert len(got) == 2
    for (split, rep), row in zip(rows, got):
        assert row["split"] == split
        assert float(row["miou"]) == rep.miou
        assert float(row["iou_cgl"]) == rep.iou_cgl
        rebuilt = IouReport(*(int(row[k]) for k in
                              ("tp_cgl", "fp_cgl", "fn_cgl", "tp_background",
                               "fp_background", "fn_background")))
        assert rebuilt == rep


def test_format_report_lists_each_split():
    text = format_report([("val", IouReport(1, 1, 0, 10, 0, 1))])
    assert "val" in text and "0.5000" in text
