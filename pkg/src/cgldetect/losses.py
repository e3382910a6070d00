"""Training objectives: per-decoder cross-entropy, rotation-equivariance of
encoder features, intraclass variance reduction over probability-gated
feature planes, and their weighted combination.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, _accumulate, _node, add, mse, rotate90, scale,
                     softmax_classes)

IVR_NORMALIZERS = ("channels", "none")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients for (main CE, auxiliary CE, equivariance, variance)."""
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    delta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive: the supervised main "
                             "term anchors training")


@dataclass(frozen=True)
class LossReport:
    l_cgl: float
    l_dflb: float
    l_gte: float
    l_ivr: float
    total: float

    def __post_init__(self):
        for name in ("l_cgl", "l_dflb", "l_gte", "l_ivr", "total"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite loss component {name}")


def cross_entropy_loss(logits, target):
    """Mean over pixels of -log softmax-probability of the target class.

    logits: Tensor (2, h, w); target: binary integer array (h, w).
    """
    target = np.asarray(target)
    if logits.data.ndim != 3 or logits.shape[0] != 2:
        raise ValueError("logits must be (2, h, w)")
    if target.shape != logits.shape[1:]:
        raise ValueError(
            f"target shape {target.shape} does not match logits {logits.shape[1:]}")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target mask must be binary")
    target = target.astype(np.intp)

    z = logits.data
    m = z.max(axis=0, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=0, keepdims=True)
    n = target.size
    picked = np.take_along_axis(p, target[None], axis=0)[0]
    out = np.asarray(-np.log(np.maximum(picked, np.finfo(z.dtype).tiny)).mean())

    def backward_fn(g):
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, target[None], 1.0, axis=0)
        _accumulate(logits, (g / n) * (p - onehot))

    return _node(out, (logits,), backward_fn)


def gte_loss(encode, image, base_features=None, direction=1):
    """Mean squared difference between features of the rotated image and the
    rotated features of the image.  Both encoder passes carry gradients.

    encode: callable (3,H,W) Tensor -> (d,h,w) Tensor.  Pass the plain
    image's features as base_features to reuse an existing forward pass.
    """
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image))
    feats = base_features if base_features is not None else encode(image)
    feats_of_rotated = encode(rotate90(image, direction))
    return mse(feats_of_rotated, rotate90(feats, direction))


def ivr_loss(y_hat_cgl, feats, normalizer="channels", detach_probabilities=False):
    """Sum over the two classes of the (per-channel averaged) spatial
    variance of probability-gated feature planes.

    For class probabilities p (softmax of y_hat_cgl) and features F, each
    plane p[i] * F[j] contributes its population variance; channel planes
    are averaged when normalizer="channels", summed for "none".  With
    detach_probabilities the probabilities act as fixed gates and no
    gradient reaches the logits.
    """
    if normalizer not in IVR_NORMALIZERS:
        raise ValueError(f"normalizer must be one of {IVR_NORMALIZERS}")
    if y_hat_cgl.data.ndim != 3 or y_hat_cgl.shape[0] != 2:
        raise ValueError("y_hat_cgl must be (2, h, w)")
    if feats.data.ndim != 3 or feats.shape[1:] != y_hat_cgl.shape[1:]:
        raise ValueError(
            f"feature planes {feats.shape} do not match logits {y_hat_cgl.shape}")

    probs = softmax_classes(y_hat_cgl)
    if detach_probabilities:
        probs = probs.detach()
    p, f = probs.data, feats.data
    d = f.shape[0]
    n = f.shape[1] * f.shape[2]
    weight = 1.0 / d if normalizer == "channels" else 1.0

    planes = p[:, None] * f[None]                      # (2, d, h, w)
    mu = planes.mean(axis=(2, 3), keepdims=True)
    centered = planes - mu
    out = np.asarray(weight * (centered * centered).mean(axis=(2, 3)).sum())

    def backward_fn(g):
        gplanes = (g * weight * 2.0 / n) * centered
        if probs.requires_grad:
            _accumulate(probs, (gplanes * f[None]).sum(axis=1))
        if feats.requires_grad:
            _accumulate(feats, (gplanes * p[:, None]).sum(axis=0))

    return _node(out, (probs, feats), backward_fn)


def weighted_total(w, l_cgl, l_dflb=None, l_gte=None, l_ivr=None):
    """Graph node for the weighted loss sum; terms with zero weight may be
    omitted (None) and then contribute nothing."""
    total = scale(l_cgl, w.alpha)
    for term, coeff in ((l_dflb, w.beta), (l_gte, w.gamma), (l_ivr, w.delta)):
        if term is not None and coeff != 0.0:
            total = add(total, scale(term, coeff))
    return total


def total_loss(l_cgl, l_dflb, l_gte, l_ivr, w=None):
    """Combine four scalar loss values into a LossReport."""
    w = w or LossWeights()
    vals = [float(v.item()) if isinstance(v, Tensor) else float(v)
            for v in (l_cgl, l_dflb, l_gte, l_ivr)]
    total = (w.alpha * vals[0] + w.beta * vals[1]
             + w.gamma * vals[2] + w.delta * vals[3])
    return LossReport(*vals, total=total)
