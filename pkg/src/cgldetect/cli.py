"""Command-line entry point: synthesize scenes, generate pseudo labels,
train, evaluate, run inference with overlay rendering, and plot histories.

One binary with subcommands; every subcommand is deterministic given its
config and seed.  Exit codes: 0 success, 1 runtime error, 2 usage error.
Environment overrides: CGLDETECT_SEED (seed for synth/train when no --seed
flag is given), CGLDETECT_THREADS (kernel thread count, read at import),
CGLDETECT_BACKEND (kernel implementation, read at import).
"""

import argparse
import csv
import dataclasses
import logging
import os
import sys

import numpy as np

from .data import (AnnotatedScene, load_coco_annotations, save_coco_dataset,
                   scene_target_mask, split_dataset, synthesize_dataset,
                   SPLIT_MODES)
from .metrics import evaluate, format_report, predict_mask, write_report_csv
from .model import load_checkpoint
from .pgt import PgtConfig, generate_pgt
from .train import HISTORY_COLUMNS, fit, parse_train_config, write_train_config

log = logging.getLogger(__name__)

SUBCOMMANDS = ("synth", "pgt", "train", "eval", "infer", "report")
SEED_ENV = "CGLDETECT_SEED"
UPSCALE = 4                      # quarter-resolution mask -> full resolution
OVERLAY_ALPHA = 0.5              # weight of the red tint on flagged pixels


class CliError(RuntimeError):
    """Runtime failure reported to the user; maps to exit status 1."""


@dataclasses.dataclass(frozen=True)
class CliInvocation:
    """A parsed, path-validated command line."""
    subcommand: str
    config: str | None = None
    inputs: tuple = ()           # paths read by the command (validated)
    output: str | None = None    # file or directory written by the command
    seed: int | None = None
    verbose: bool = False
    options: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ValueError(f"subcommand must be one of {SUBCOMMANDS}")


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="cgl",
        description="Hideout-region segmentation: data synthesis, "
                    "pseudo-label generation, training, evaluation, "
                    "inference overlays and history plots.",
        epilog="Environment: CGLDETECT_SEED overrides the default seed, "
               "CGLDETECT_THREADS caps kernel threads, CGLDETECT_BACKEND "
               "selects the kernel implementation (numba|numpy).")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    p = sub.add_parser("synth", parents=[common],
                       help="synthesize an annotated scene dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", default="disjoint-locations",
                   choices=SPLIT_MODES + ("none",),
                   help="train/test partition mode written into the "
                        "annotations (default: disjoint-locations)")
    p.add_argument("--ratio", type=float, default=0.8,
                   help="train fraction for the split (default: 0.8)")

    p = sub.add_parser("pgt", parents=[common],
                       help="write pseudo-label masks for a dataset")
    p.add_argument("--data", required=True, help="COCO-style annotations.json")
    p.add_argument("--out", required=True, help="output directory for masks")
    p.add_argument("--threshold", type=float, default=PgtConfig.threshold)
    p.add_argument("--kernel-size", type=int,
                   default=PgtConfig.smoothing_kernel_size)

    p = sub.add_parser("train", parents=[common],
                       help="train a model on an annotated dataset")
    p.add_argument("--config", required=True, help="key=value run config")
    p.add_argument("--data", required=True, help="COCO-style annotations.json")
    p.add_argument("--out", required=True, help="run directory (history, "
                   "checkpoints)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's training and init seeds")
    p.add_argument("--resume", default=None, help="last.cglm to resume from")
    p.add_argument("--cache-dir", default=None,
                   help="directory for cached pseudo-label patterns")

    p = sub.add_parser("eval", parents=[common],
                       help="report IoU of a checkpoint on a dataset")
    p.add_argument("--model", required=True, help="model checkpoint (.cglm)")
    p.add_argument("--data", required=True, help="COCO-style annotations.json")
    p.add_argument("--split", default=None,
                   help="restrict to scenes with this split tag")
    p.add_argument("--out", default=None, help="optional report CSV path")

    p = sub.add_parser("infer", parents=[common],
                       help="segment one image and write an overlay")
    p.add_argument("--model", required=True, help="model checkpoint (.cglm)")
    p.add_argument("--image", required=True, help="input image (RGB)")
    p.add_argument("--out", required=True, help="overlay PNG path; the raw "
                   "mask lands next to it as <stem>_mask.png")

    p = sub.add_parser("report", parents=[common],
                       help="plot training histories; compare several runs")
    p.add_argument("histories", nargs="+", metavar="HISTORY_CSV")
    p.add_argument("--out", required=True, help="output directory for plots")
    p.add_argument("--labels", default=None,
                   help="comma-separated run labels (default: file stems)")
    p.add_argument("--format", default="png", choices=("png", "svg"),
                   dest="image_format")
    return parser


def _resolve_seed(flag_value):
    """--seed flag wins; otherwise the CGLDETECT_SEED variable; else None."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {env!r}")


def parse_invocation(argv):
    """Parse argv into a CliInvocation.  Usage errors exit with status 2
    (argparse); referenced input paths are checked here, before any work,
    and raise CliError (status 1) naming the missing path.
    """
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.subcommand is None:
        parser.print_usage(sys.stderr)
        parser.exit(2, f"{parser.prog}: error: a subcommand is required\n")

    inputs = []
    config = getattr(ns, "config", None)
    if config:
        inputs.append(config)
    for attr in ("data", "model", "image", "resume"):
        value = getattr(ns, attr, None)
        if value:
            inputs.append(value)
    inputs.extend(getattr(ns, "histories", []))
    for path in inputs:
        if not os.path.exists(path):
            raise CliError(f"missing input path: {path}")

    known = {"subcommand", "config", "verbose", "seed", "out"}
    options = {k: v for k, v in vars(ns).items() if k not in known}
    return CliInvocation(
        subcommand=ns.subcommand,
        config=config,
        inputs=tuple(inputs),
        output=getattr(ns, "out", None),
        seed=_resolve_seed(getattr(ns, "seed", None)),
        verbose=ns.verbose,
        options=options)


# ---------------------------------------------------------------------------
# subcommand bodies

def cmd_synth(out_dir, count, seed, size=64, split="disjoint-locations",
              ratio=0.8):
    scenes = synthesize_dataset(count, seed, size=size)
    if split != "none":
        train, test = split_dataset(scenes, split, ratio=ratio, seed=seed)
        log.info("split %s: %d train / %d test", split, len(train), len(test))
    path = save_coco_dataset(scenes, out_dir)
    log.info("wrote %d scenes to %s", len(scenes), path)
    return path


def cmd_pgt(data_path, out_dir, cfg=None):
    """Write each annotated scene's pseudo-label mask as a 1-bit PNG."""
    from PIL import Image
    cfg = cfg or PgtConfig()
    scenes = load_coco_annotations(data_path, load_images=False)
    os.makedirs(out_dir, exist_ok=True)
    written = 0
    for scene in scenes:
        if scene.depth is None:
            log.warning("scene %r has no depth map; skipped", scene.name)
            continue
        target = generate_pgt(scene.depth, scene_target_mask(scene), cfg)
        stem = os.path.splitext(os.path.basename(scene.name))[0]
        out_path = os.path.join(out_dir, f"{stem}_pgt.png")
        Image.fromarray(target.astype(bool)).save(out_path, bits=1)
        written += 1
    if not written:
        raise CliError(f"no scene in {data_path} carries a depth map")
    log.info("wrote %d pseudo-label masks to %s", written, out_dir)
    return written


def cmd_train(config_path, data_path, out_dir, seed=None, resume=None,
              cache_dir=None):
    cfg = parse_train_config(config_path)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg, seed=seed,
            encoder=dataclasses.replace(cfg.encoder, seed=seed))
    scenes = load_coco_annotations(data_path)
    train_scenes = [s for s in scenes if s.split_tag in (None, "train")]
    val_scenes = [s for s in scenes if s.split_tag == "test"] or None
    if not train_scenes:
        raise CliError(f"no training scenes in {data_path}")
    os.makedirs(out_dir, exist_ok=True)
    write_train_config(os.path.join(out_dir, "run.cfg"), cfg)
    model, history = fit(train_scenes, cfg, val_scenes=val_scenes,
                         out_dir=out_dir, resume_from=resume,
                         cache_dir=cache_dir)
    if history:
        last = history[-1]
        log.info("finished: epoch %d, cgl_iou %.4f (best %.4f)",
                 last["epoch"], last["cgl_iou"],
                 max(r["cgl_iou"] for r in history))
    return model, history


def cmd_eval(model_path, data_path, split=None, out_csv=None):
    model, _, _ = load_checkpoint(model_path)
    scenes = load_coco_annotations(data_path)
    if split is not None:
        scenes = [s for s in scenes if s.split_tag == split]
        if not scenes:
            raise CliError(f"no scenes tagged {split!r} in {data_path}")
        groups = [(split, scenes)]
    else:
        tags = sorted({s.split_tag or "all" for s in scenes})
        groups = [(t, [s for s in scenes if (s.split_tag or "all") == t])
                  for t in tags]
    rows = [(tag, evaluate(model, group)[0]) for tag, group in groups]
    if out_csv:
        write_report_csv(out_csv, rows)
        log.info("wrote %s", out_csv)
    print(format_report(rows))
    return rows


def _dilate8(mask):
    """One step of 8-neighborhood binary dilation."""
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def render_overlay(image, mask):
    """Composite a translucent red tint over mask pixels (upsampled 4x,
    nearest-neighbor) and a green outline just outside each blob.
    Returns (overlay uint8 HxWx3, full-resolution boolean mask).
    """
    full = np.repeat(np.repeat(mask, UPSCALE, axis=0),
                     UPSCALE, axis=1).astype(bool)
    if full.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not upsample to image "
                         f"{image.shape[:2]}")
    out = image.astype(np.float64).copy()
    red = np.array([255.0, 0.0, 0.0])
    out[full] = (1.0 - OVERLAY_ALPHA) * out[full] + OVERLAY_ALPHA * red
    outline = _dilate8(full) & ~full
    out[outline] = (0.0, 255.0, 0.0)
    return np.rint(out).astype(np.uint8), full


def cmd_infer_overlay(model_path, image_path, out_path):
    """Run an infer-mode forward pass on one image; write the overlay PNG
    and the raw quarter-resolution mask as a 1-bit PNG next to it.

    Consumes only the checkpoint and the image: no depth data is read.
    """
    from PIL import Image
    model, _, _ = load_checkpoint(model_path)
    with Image.open(image_path) as img:
        image = np.asarray(img.convert("RGB"))
    if image.shape[0] % UPSCALE or image.shape[1] % UPSCALE:
        raise CliError(f"image dimensions {image.shape[:2]} must be "
                       f"divisible by {UPSCALE}")
    scene = AnnotatedScene(image=image, boxes=[], name=image_path)
    mask = predict_mask(model, scene)
    overlay, _ = render_overlay(image, mask)

    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    stem, _ext = os.path.splitext(out_path)
    mask_path = f"{stem}_mask.png"
    Image.fromarray(overlay).save(out_path)
    Image.fromarray(mask.astype(bool)).save(mask_path, bits=1)
    log.info("wrote %s and %s (%d flagged cells)",
             out_path, mask_path, int(mask.sum()))
    return out_path, mask_path


def read_history_csv(path):
    """Parse a trainer history.csv into a list of typed row dicts."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(HISTORY_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise CliError(f"{path}: missing history columns "
                           f"{sorted(missing)}")
        rows = []
        for i, rec in enumerate(reader):
            try:
                row = {k: (int(rec[k]) if k == "epoch" else float(rec[k]))
                       for k in HISTORY_COLUMNS}
            except (TypeError, ValueError):
                raise CliError(f"{path}: malformed row {i + 1}")
            rows.append(row)
    if not rows:
        raise CliError(f"{path}: history is empty")
    return rows


def _component_flags(rows):
    """A loss component was active iff its column is ever nonzero."""
    return {name: any(row[name] != 0.0 for row in rows)
            for name in ("l_dflb", "l_gte", "l_ivr")}


def ablation_rows(histories, labels):
    """Comparison table: per run, which components were on and the final
    mIoU / hideout-class IoU."""
    rows = []
    for label, hist in zip(labels, histories):
        flags = _component_flags(hist)
        final = hist[-1]
        rows.append({"run": label,
                     "dflb": "on" if flags["l_dflb"] else "off",
                     "gte": "on" if flags["l_gte"] else "off",
                     "ivr": "on" if flags["l_ivr"] else "off",
                     "miou": final["miou"],
                     "cgl_iou": final["cgl_iou"]})
    return rows


def cmd_report(history_paths, out_dir, labels=None, image_format="png"):
    """Render loss/IoU curves per run; with several runs, also write an
    ablation comparison table (CSV + rendered image)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if labels is None:
        labels = [os.path.splitext(os.path.basename(p))[0] if
                  os.path.basename(p) != "history.csv" else
                  os.path.basename(os.path.dirname(os.path.abspath(p)))
                  for p in history_paths]
    if len(labels) != len(history_paths):
        raise CliError(f"{len(labels)} labels for {len(history_paths)} "
                       "histories")
    if len(set(labels)) != len(labels):
        labels = [f"{lab}_{i}" for i, lab in enumerate(labels)]
    histories = [read_history_csv(p) for p in history_paths]
    os.makedirs(out_dir, exist_ok=True)
    written = []

    for label, hist in zip(labels, histories):
        epochs = [r["epoch"] for r in hist]
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in ("l_cgl", "l_dflb", "l_gte", "l_ivr", "total"):
            ax.plot(epochs, [r[name] for r in hist], marker="o",
                    markersize=3, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(f"{label}: loss components")
        ax.legend()
        path = os.path.join(out_dir, f"{label}_loss.{image_format}")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(6, 4))
        for name in ("miou", "cgl_iou"):
            ax.plot(epochs, [r[name] for r in hist], marker="o",
                    markersize=3, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("IoU")
        ax.set_ylim(0.0, 1.0)
        ax.set_title(f"{label}: validation IoU")
        ax.legend()
        path = os.path.join(out_dir, f"{label}_iou.{image_format}")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    if len(histories) > 1:
        table = ablation_rows(histories, labels)
        csv_path = os.path.join(out_dir, "ablation.csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=("run", "dflb", "gte", "ivr", "miou",
                                "cgl_iou"))
            writer.writeheader()
            writer.writerows(table)
        written.append(csv_path)

        fig, ax = plt.subplots(figsize=(7, 0.6 + 0.4 * len(table)))
        ax.axis("off")
        cells = [[r["run"], r["dflb"], r["gte"], r["ivr"],
                  f"{r['miou']:.4f}", f"{r['cgl_iou']:.4f}"] for r in table]
        ax.table(cellText=cells,
                 colLabels=("run", "DFLB", "GTE", "IVR", "mIoU", "CGL IoU"),
                 loc="center")
        path = os.path.join(out_dir, f"ablation.{image_format}")
        fig.savefig(path, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    log.info("wrote %d report files to %s", len(written), out_dir)
    return written


# ---------------------------------------------------------------------------
# dispatch

def _run_synth(inv):
    cmd_synth(inv.output, inv.options["count"],
              inv.seed if inv.seed is not None else 0,
              size=inv.options["size"], split=inv.options["split"],
              ratio=inv.options["ratio"])


def _run_pgt(inv):
    cfg = PgtConfig(smoothing_kernel_size=inv.options["kernel_size"],
                    threshold=inv.options["threshold"])
    cmd_pgt(inv.options["data"], inv.output, cfg)


def _run_train(inv):
    cmd_train(inv.config, inv.options["data"], inv.output, seed=inv.seed,
              resume=inv.options["resume"],
              cache_dir=inv.options["cache_dir"])


def _run_eval(inv):
    cmd_eval(inv.options["model"], inv.options["data"],
             split=inv.options["split"], out_csv=inv.output)


def _run_infer(inv):
    cmd_infer_overlay(inv.options["model"], inv.options["image"], inv.output)


def _run_report(inv):
    labels = inv.options["labels"]
    cmd_report(inv.options["histories"], inv.output,
               labels=labels.split(",") if labels else None,
               image_format=inv.options["image_format"])


_DISPATCH = {"synth": _run_synth, "pgt": _run_pgt, "train": _run_train,
             "eval": _run_eval, "infer": _run_infer, "report": _run_report}


def main(argv=None):
    try:
        inv = parse_invocation(argv)
    except CliError as exc:
        print(f"cgl: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if inv.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        _DISPATCH[inv.subcommand](inv)
    except CliError as exc:
        log.error("%s", exc)
        return 1
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
