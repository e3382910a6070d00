"""Training orchestration: config parsing, target preparation with a disk
cache, the four-loss training step, and the seeded epoch loop with
checkpoint/resume support.

Shuffles are derived per epoch from (seed, epoch), never from a stateful
generator, so a resumed run replays the exact batch order of an
uninterrupted one.
"""

import csv
import dataclasses
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .losses import (IVR_NORMALIZERS, LossWeights, cross_entropy_loss,
                     gte_loss, ivr_loss, total_loss, weighted_total)
from .metrics import evaluate
from .model import (CglModel, EncoderConfig, load_checkpoint, save_checkpoint)
from .pgt import PgtConfig, generate_pgt
from .data import scene_target_mask, scene_to_input
from .tensor import SGD, NonFiniteError, Tensor, add, hadamard, scale

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "l_cgl", "l_dflb", "l_gte", "l_ivr", "total",
                   "miou", "cgl_iou")
PRECISIONS = (32, 64)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    precision: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pgt: PgtConfig = field(default_factory=PgtConfig)
    ivr_normalizer: str = "channels"
    ivr_detach_probabilities: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")
        if self.ivr_normalizer not in IVR_NORMALIZERS:
            raise ValueError(f"ivr_normalizer must be one of {IVR_NORMALIZERS}")

    def model_dtype(self):
        return "float32" if self.precision == 32 else "float64"

    def build_model(self):
        return CglModel(dataclasses.replace(self.encoder, dtype=self.model_dtype()))


# ---------------------------------------------------------------------------
# key=value config files

_CONFIG_KEYS = {
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "momentum": ("momentum", float),
    "seed": ("seed", int),
    "precision": ("precision", int),
    "weights.alpha": ("weights", "alpha", float),
    "weights.beta": ("weights", "beta", float),
    "weights.gamma": ("weights", "gamma", float),
    "weights.delta": ("weights", "delta", float),
    "encoder.d": ("encoder", "d", int),
    "encoder.depth_of_stack": ("encoder", "depth_of_stack", int),
    "encoder.seed": ("encoder", "seed", int),
    "pgt.smoothing_kernel_size": ("pgt", "smoothing_kernel_size", int),
    "pgt.threshold": ("pgt", "threshold", float),
    "pgt.response_mode": ("pgt", "response_mode", str),
    "ivr.normalizer": ("ivr_normalizer", str),
    "ivr.detach_probabilities": ("ivr_detach_probabilities", None),  # boolean
}


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_train_config(path):
    """Read a key=value config file (one pair per line, # comments)."""
    top = {}
    nested = {"weights": {}, "encoder": {}, "pgt": {}}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            spec = _CONFIG_KEYS.get(key)
            if spec is None:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            if len(spec) == 2:
                dest, conv = spec
                top[dest] = _parse_bool(value) if conv is None else conv(value)
            else:
                group, aname, conv = spec
                nested[group][aname] = conv(value)
    if nested["weights"]:
        top["weights"] = LossWeights(**nested["weights"])
    if nested["encoder"]:
        top["encoder"] = EncoderConfig(**nested["encoder"])
    if nested["pgt"]:
        top["pgt"] = PgtConfig(**nested["pgt"])
    return TrainConfig(**top)


def write_train_config(path, cfg):
    lines = [
        f"epochs = {cfg.epochs}", f"batch_size = {cfg.batch_size}",
        f"lr = {cfg.lr!r}", f"momentum = {cfg.momentum!r}",
        f"seed = {cfg.seed}", f"precision = {cfg.precision}",
        f"weights.alpha = {cfg.weights.alpha!r}",
        f"weights.beta = {cfg.weights.beta!r}",
        f"weights.gamma = {cfg.weights.gamma!r}",
        f"weights.delta = {cfg.weights.delta!r}",
        f"encoder.d = {cfg.encoder.d}",
        f"encoder.depth_of_stack = {cfg.encoder.depth_of_stack}",
        f"encoder.seed = {cfg.encoder.seed}",
        f"pgt.smoothing_kernel_size = {cfg.pgt.smoothing_kernel_size}",
        f"pgt.threshold = {cfg.pgt.threshold!r}",
        f"pgt.response_mode = {cfg.pgt.response_mode}",
        f"ivr.normalizer = {cfg.ivr_normalizer}",
        f"ivr.detach_probabilities = {str(cfg.ivr_detach_probabilities).lower()}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# target preparation

def _pgt_cache_key(depth, cfg):
    h = hashlib.sha256()
    h.update(struct.pack("<II", *depth.shape))
    h.update(np.ascontiguousarray(depth, dtype="<f8").tobytes())
    h.update(cfg.key().encode())
    return h.hexdigest()


def pgt_target(depth, y_cgl, cfg, cache_dir=None):
    """generate_pgt with an optional on-disk cache keyed by the depth
    raster's content hash and the PGT parameters."""
    if cache_dir is None:
        return generate_pgt(depth, y_cgl, cfg)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, _pgt_cache_key(depth, cfg) + ".npy")
    pattern = None
    if os.path.exists(path):
        pattern = np.load(path)
        if pattern.shape != y_cgl.shape:
            pattern = None
    if pattern is None:
        # cache the depth-only pattern so one depth map serves any y_cgl
        pattern = generate_pgt(depth, np.zeros_like(y_cgl), cfg)
        np.save(path, pattern)
    return np.maximum(pattern, y_cgl.astype(np.uint8))


def prepare_batch_items(scenes, cfg, cache_dir=None):
    """Materialize (image, y_cgl, y_dflb) training triples for each scene."""
    items = []
    dtype = np.dtype(cfg.model_dtype())
    for scene in scenes:
        if scene.depth is None:
            raise ValueError(
                f"scene {scene.name!r} has no depth raster; auxiliary "
                "targets are derived from depth at training time")
        y_cgl = scene_target_mask(scene)
        y_dflb = pgt_target(scene.depth, y_cgl, cfg.pgt, cache_dir)
        items.append((scene_to_input(scene, dtype), y_cgl, y_dflb))
    return items


# ---------------------------------------------------------------------------
# training steps

def trainable_parameters(model, weights):
    """All parameters the active objective can reach.  With beta = 0 the
    auxiliary head receives no gradient from any term, so it is excluded
    rather than passed to the optimizer ungradded."""
    params = model.named_parameters()
    if weights.beta == 0.0:
        params = {k: v for k, v in params.items() if not k.startswith("dflb.head.")}
    return params


def train_step(model, batch, cfg, optimizer=None):
    """One optimization step over a batch of (image, y_cgl, y_dflb).

    Runs both decoders, averages the active loss terms over the batch,
    backpropagates the weighted total, and applies one optimizer step.
    """
    if not batch:
        raise ValueError("empty batch")
    if optimizer is None:
        optimizer = SGD(trainable_parameters(model, cfg.weights),
                        lr=cfg.lr, momentum=cfg.momentum)
    w = cfg.weights
    sums = {"l_cgl": 0.0, "l_dflb": 0.0, "l_gte": 0.0, "l_ivr": 0.0}
    total = None
    for image, y_cgl, y_dflb in batch:
        x = Tensor(np.asarray(image, dtype=model.config.np_dtype()))
        feats = model.encode(x, training=True)
        aux_feats = model.dflb.features(feats, True)
        main_feats = model.cglsb.features(feats, True)
        main_logits = model.cglsb.logits(hadamard(aux_feats, main_feats))

        l_cgl = cross_entropy_loss(main_logits, y_cgl)
        l_dflb = l_gte = l_ivr = None
        if w.beta > 0:
            l_dflb = cross_entropy_loss(model.dflb.logits(aux_feats), y_dflb)
        if w.gamma > 0:
            l_gte = gte_loss(lambda im: model.encode(im, training=True),
                             x, base_features=feats)
        if w.delta > 0:
            l_ivr = ivr_loss(main_logits, feats,
                             normalizer=cfg.ivr_normalizer,
                             detach_probabilities=cfg.ivr_detach_probabilities)
        part = weighted_total(w, l_cgl, l_dflb, l_gte, l_ivr)
        total = part if total is None else add(total, part)
        for name, term in (("l_cgl", l_cgl), ("l_dflb", l_dflb),
                           ("l_gte", l_gte), ("l_ivr", l_ivr)):
            sums[name] += term.item() if term is not None else 0.0

    total = scale(total, 1.0 / len(batch))
    if not np.isfinite(total.item()):
        raise NonFiniteError(
            f"non-finite training loss: components "
            f"{ {k: v / len(batch) for k, v in sums.items()} }")
    total.backward()
    optimizer.step()
    return total_loss(*(sums[k] / len(batch) for k in
                        ("l_cgl", "l_dflb", "l_gte", "l_ivr")), w=w)


def _epoch_order(seed, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def fit(train_scenes, cfg, val_scenes=None, out_dir=None, resume_from=None,
        cache_dir=None):
    """Seeded epoch loop.  Returns (model with the best-by-CGL-IoU weights,
    history rows).  With out_dir set, writes history.csv, last.cglm (with
    optimizer velocities, resumable) and best.cglm per epoch.
    """
    if not train_scenes:
        raise ValueError("empty training split")
    eval_scenes = val_scenes if val_scenes else train_scenes
    items = prepare_batch_items(train_scenes, cfg, cache_dir)

    start_epoch, best_iou = 0, -1.0
    if resume_from is not None:
        model, extra, meta = load_checkpoint(resume_from)
        start_epoch = int(meta["epoch"])
        best_iou = float(meta.get("best_cgl_iou", -1.0))
        optimizer = SGD(trainable_parameters(model, cfg.weights),
                        lr=cfg.lr, momentum=cfg.momentum)
        for name in optimizer.velocity:
            rec = extra.get(f"opt.{name}")
            if rec is None:
                log.warning("no stored velocity for %r; starting from zero", name)
            else:
                optimizer.velocity[name] = rec.astype(
                    optimizer.params[name].data.dtype)
    else:
        model = cfg.build_model()
        optimizer = SGD(trainable_parameters(model, cfg.weights),
                        lr=cfg.lr, momentum=cfg.momentum)

    best_state = None
    history = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        history_path = os.path.join(out_dir, "history.csv")
        new_file = start_epoch == 0 or not os.path.exists(history_path)
        history_fh = open(history_path, "w" if new_file else "a", newline="")
        writer = csv.DictWriter(history_fh, fieldnames=HISTORY_COLUMNS)
        if new_file:
            writer.writeheader()

    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = _epoch_order(cfg.seed, epoch, len(items))
            acc = {k: 0.0 for k in ("l_cgl", "l_dflb", "l_gte", "l_ivr")}
            seen = 0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                batch = [items[i] for i in idx]
                report = train_step(model, batch, cfg, optimizer)
                for k in acc:
                    acc[k] += getattr(report, k) * len(batch)
                seen += len(batch)
            means = {k: v / seen for k, v in acc.items()}
            mean_report = total_loss(means["l_cgl"], means["l_dflb"],
                                     means["l_gte"], means["l_ivr"], w=cfg.weights)
            iou, _ = evaluate(model, eval_scenes)
            row = {"epoch": epoch, **means, "total": mean_report.total,
                   "miou": iou.miou, "cgl_iou": iou.iou_cgl}
            history.append(row)
            log.info("epoch %d: total %.4f, miou %.4f, cgl_iou %.4f",
                     epoch, row["total"], row["miou"], row["cgl_iou"])

            if iou.iou_cgl > best_iou:
                best_iou = iou.iou_cgl
                best_state = {k: v.copy() for k, v in model.named_state().items()}
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "best.cglm"), model,
                                    meta={"epoch": epoch + 1,
                                          "best_cgl_iou": best_iou})
            if out_dir:
                writer.writerow(row)
                history_fh.flush()
                velocities = {f"opt.{k}": v for k, v in optimizer.velocity.items()}
                save_checkpoint(os.path.join(out_dir, "last.cglm"), model,
                                extra=velocities,
                                meta={"epoch": epoch + 1,
                                      "best_cgl_iou": best_iou})
    finally:
        if out_dir:
            history_fh.close()

    if best_state is None and out_dir and resume_from is not None:
        best_path = os.path.join(out_dir, "best.cglm")
        if os.path.exists(best_path):
            best_model, _, _ = load_checkpoint(best_path)
            best_state = best_model.named_state()
    if best_state is not None:
        for name, arr in model.named_state().items():
            arr[...] = best_state[name]
    return model, history
