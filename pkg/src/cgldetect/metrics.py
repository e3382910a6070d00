"""Evaluation protocol: class-wise IoU with dataset-level count
accumulation, detector-box-to-mask conversion, and CSV report emission.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .data import CglBox, boxes_to_mask, scene_target_mask, scene_to_input

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("split", "miou", "iou_cgl", "iou_background",
                  "tp_cgl", "fp_cgl", "fn_cgl",
                  "tp_background", "fp_background", "fn_background")


@dataclass(frozen=True)
class IouReport:
    """Pixel counts per class and the IoUs they imply.  Counts from
    several images may be summed before the final division; an empty
    union scores 1.0 (vacuous agreement)."""
    tp_cgl: int = 0
    fp_cgl: int = 0
    fn_cgl: int = 0
    tp_background: int = 0
    fp_background: int = 0
    fn_background: int = 0

    @staticmethod
    def _iou(tp, fp, fn):
        union = tp + fp + fn
        return 1.0 if union == 0 else tp / union

    @property
    def iou_cgl(self):
        return self._iou(self.tp_cgl, self.fp_cgl, self.fn_cgl)

    @property
    def iou_background(self):
        return self._iou(self.tp_background, self.fp_background, self.fn_background)

    @property
    def miou(self):
        return (self.iou_background + self.iou_cgl) / 2.0

    def __add__(self, other):
        return IouReport(*(getattr(self, f) + getattr(other, f)
                           for f in ("tp_cgl", "fp_cgl", "fn_cgl",
                                     "tp_background", "fp_background",
                                     "fn_background")))

    def row(self, split=""):
        return {"split": split, "miou": self.miou, "iou_cgl": self.iou_cgl,
                "iou_background": self.iou_background,
                "tp_cgl": self.tp_cgl, "fp_cgl": self.fp_cgl,
                "fn_cgl": self.fn_cgl, "tp_background": self.tp_background,
                "fp_background": self.fp_background,
                "fn_background": self.fn_background}


def iou_per_class(pred, gt):
    """Count-based IoU of a binary prediction against a binary target."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return IouReport(
        tp_cgl=int((p & g).sum()), fp_cgl=int((p & ~g).sum()),
        fn_cgl=int((~p & g).sum()),
        tp_background=int((~p & ~g).sum()), fp_background=int((~p & g).sum()),
        fn_background=int((p & ~g).sum()))


def detections_to_mask(boxes, height, width, scale=4):
    """Union of detector boxes as a binary mask at 1/scale resolution.

    Boxes reaching past the border are clipped with a warning, so the
    one metric path serves detectors and segmenters alike.
    """
    clipped = []
    for box in boxes:
        x0, y0 = max(box.x, 0), max(box.y, 0)
        x1, y1 = min(box.x + box.w, width), min(box.y + box.h, height)
        if (x0, y0, x1 - x0, y1 - y0) != (box.x, box.y, box.w, box.h):
            log.warning("clipped detection %s to %dx%d image", box, width, height)
        if x1 > x0 and y1 > y0:
            clipped.append(CglBox(x0, y0, x1 - x0, y1 - y0))
    return boxes_to_mask(clipped, height, width, scale)


def predict_mask(model, scene):
    """Argmax class mask of the model's main logits at quarter resolution."""
    logits = model.forward(scene_to_input(scene, model.config.np_dtype()),
                           mode="infer")
    return logits.data.argmax(axis=0).astype(np.uint8)


def evaluate(model, scenes, split=""):
    """Dataset-level IoU over a split: per-image counts are summed, then
    divided once.  Returns (IouReport, per-image list of (name, IouReport)).
    """
    if not scenes:
        raise ValueError("cannot evaluate an empty split")
    total = IouReport()
    per_image = []
    for scene in scenes:
        rep = iou_per_class(predict_mask(model, scene), scene_target_mask(scene))
        per_image.append((scene.name, rep))
        total = total + rep
    return total, per_image


def write_report_csv(path, rows):
    """rows: iterable of (split_label, IouReport)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for split, rep in rows:
            writer.writerow(rep.row(split))


def format_report(rows):
    """Human-readable table of (split_label, IouReport) rows."""
    lines = [f"{'split':<12} {'miou':>8} {'iou_cgl':>8} {'iou_bg':>8}"]
    for split, rep in rows:
        lines.append(f"{split:<12} {rep.miou:8.4f} {rep.iou_cgl:8.4f} "
                     f"{rep.iou_background:8.4f}")
    return "\n".join(lines)
