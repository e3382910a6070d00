"""Depth-cue pseudo ground truth.

Turns a depth raster into a binary mask of "hideout edge" patterns: smooth,
take the Sobel gradient, squash through a sigmoid, threshold, downsample to
quarter resolution and OR with the hand-annotated boxes.  The result
supervises the auxiliary decoder; depth is consumed here and nowhere else,
inference never sees it.

Masks are uint8 arrays of {0,1}.  Depth rasters are float arrays, H x W,
finite and non-negative, min-max normalized per image before filtering.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import backend as _B
from .tensor import _sigmoid_raw

DepthMap = np.ndarray
LabelMask = np.ndarray

SOBEL_G = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])

RESPONSE_MODES = ("magnitude", "signed-horizontal")


@dataclass
class PgtConfig:
    """Knobs of the pseudo-label generator.

    response_mode "magnitude" combines horizontal and vertical Sobel
    responses (needed for horizontally oriented hideout boxes);
    "signed-horizontal" applies only the horizontal kernel.
    """
    smoothing_kernel_size: int = 11
    threshold: float = 0.55
    response_mode: str = "magnitude"

    def __post_init__(self):
        if self.smoothing_kernel_size < 1 or self.smoothing_kernel_size % 2 == 0:
            raise ValueError("smoothing kernel size must be odd and positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.response_mode not in RESPONSE_MODES:
            raise ValueError(f"response_mode must be one of {RESPONSE_MODES}")

    def key(self):
        return (f"k{self.smoothing_kernel_size}-th{self.threshold!r}-"
                f"{self.response_mode}")


def _correlate_replicate(plane, kernel):
    """2D cross-correlation with replicate (edge) border handling."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(plane, ((ph, ph), (pw, pw)), mode="edge")
    return _B.correlate2d_valid(padded, np.ascontiguousarray(kernel, dtype=plane.dtype))


def normalize_depth(depth):
    """Min-max normalize to [0,1]; a constant raster maps to all zeros."""
    depth = np.asarray(depth, dtype=np.float64)
    lo = depth.min()
    hi = depth.max()
    if hi == lo:
        return np.zeros_like(depth)
    return (depth - lo) / (hi - lo)


def cgl_pattern_response(depth, cfg=None):
    """Sigmoid-squashed Sobel response of the smoothed, normalized depth."""
    cfg = cfg or PgtConfig()
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth must be a 2D raster")
    if not np.isfinite(depth).all():
        raise ValueError("depth raster contains non-finite values")
    if (depth < 0).any():
        raise ValueError("depth raster contains negative values")
    k = cfg.smoothing_kernel_size
    k_avg = np.full((k, k), 1.0 / (k * k))
    smoothed = _correlate_replicate(normalize_depth(depth), k_avg)
    gx = _correlate_replicate(smoothed, SOBEL_G)
    if cfg.response_mode == "magnitude":
        gy = _correlate_replicate(smoothed, SOBEL_G.T)
        r = np.sqrt(gx * gx + gy * gy)
    else:
        r = gx
    return _sigmoid_raw(r)


def binarize(g, threshold=0.55):
    """1 where the squashed response reaches the threshold, else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    return (np.asarray(g) >= threshold).astype(np.uint8)


def downsample_any_block(mask, block=4):
    """Quarter-resolution reduction: a cell is 1 if any pixel in its
    block x block neighborhood is 1 (keeps one-pixel edge bands alive)."""
    h, w = mask.shape
    if h % block or w % block:
        raise ValueError(f"mask dimensions must be divisible by {block}")
    view = mask.reshape(h // block, block, w // block, block)
    return view.any(axis=(1, 3)).astype(np.uint8)


def fuse_with_gt(pattern, y_cgl):
    """OR-fuse the depth pattern mask with the annotation mask."""
    pattern = np.asarray(pattern, dtype=np.uint8)
    y_cgl = np.asarray(y_cgl, dtype=np.uint8)
    if pattern.shape != y_cgl.shape:
        raise ValueError(f"mask shapes differ: {pattern.shape} vs {y_cgl.shape}")
    return (pattern | y_cgl).astype(np.uint8)


def generate_pgt(depth, y_cgl, cfg=None):
    """Full pipeline: depth raster (H,W) + annotation mask (H/4,W/4) ->
    auxiliary-decoder target mask (H/4,W/4)."""
    cfg = cfg or PgtConfig()
    depth = np.asarray(depth)
    y_cgl = np.asarray(y_cgl, dtype=np.uint8)
    qh, qw = depth.shape[0] // 4, depth.shape[1] // 4
    if y_cgl.shape != (qh, qw):
        raise ValueError(
            f"annotation mask must be quarter resolution {(qh, qw)}, got {y_cgl.shape}")
    g = cgl_pattern_response(depth, cfg)
    b = binarize(g, cfg.threshold)
    return fuse_with_gt(downsample_any_block(b), y_cgl)


# ---------------------------------------------------------------------------
# depth raster I/O

DEPTH_MAGIC = b"CGLD"
_PNG_MAGIC = b"\x89PNG"


def write_depth_raster(path, values):
    """Canonical binary format: magic 'CGLD', H and W as uint32 LE, then
    H*W float32 LE values in row-major order."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("depth raster must be 2D")
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", values.shape[0], values.shape[1]))
        fh.write(values.astype("<f4").tobytes(order="C"))


def read_depth_raster(path):
    """Read a CGLD raster or a 16-bit grayscale PNG (normalized on load)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == DEPTH_MAGIC:
            h, w = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(h * w * 4), dtype="<f4")
            if data.size != h * w:
                raise ValueError(f"truncated depth raster {path}")
            return data.reshape(h, w).astype(np.float64)
    if head == _PNG_MAGIC:
        from PIL import Image
        with Image.open(path) as img:
            if img.mode not in ("I", "I;16", "L"):
                raise ValueError(f"depth PNG must be grayscale, got mode {img.mode}")
            arr = np.asarray(img, dtype=np.float64)
        return normalize_depth(arr)
    raise ValueError(f"unrecognized depth file {path} (expected CGLD raster or PNG)")
