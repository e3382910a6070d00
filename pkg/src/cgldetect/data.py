"""Dataset handling: COCO-style annotation ingest, box-to-mask encoding,
train/test splitting, and a procedural synthetic scene generator with
analytic depth for oracle-backed testing and desk-scale training.

Synthetic scenes are flat-colored occluder rectangles over a wall/floor
background.  Hideout boxes straddle qualifying occluder edges with ~40% of
their area on the occluder, the box mix is ~59% vertical / 41% horizontal,
and boxes cover ~10% of the image; band thickness follows the ~100px
convention of the real annotations, scaled to image size.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .pgt import downsample_any_block, read_depth_raster, write_depth_raster

log = logging.getLogger(__name__)

# fraction of the (minor) image dimension used as box band thickness
_BAND_RATIO = 100.0 / 1280.0
# cap on vertical box height ("human height"), fraction of image height
_HUMAN_RATIO = 0.53
# luminance drop of the contact-shadow seam along real depth edges
SEAM_DARKEN = 45


@dataclass
class CglBox:
    """Axis-aligned hideout box; (x, y) is the top-left pixel."""
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box {self}")

    @property
    def orientation(self):
        return "vertical" if self.h > self.w else "horizontal"


@dataclass
class AnnotatedScene:
    image: np.ndarray                 # uint8 (H, W, 3)
    boxes: list
    depth: np.ndarray | None = None   # float (H, W), same dims as image
    name: str = ""
    location: str | None = None       # scene family tag, used by the splitter
    split_tag: str | None = None

    def __post_init__(self):
        if self.depth is not None and self.depth.shape != self.image.shape[:2]:
            raise ValueError("depth dimensions must match the image")

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


@dataclass
class Occluder:
    x: int
    y: int
    w: int
    h: int
    depth_offset: float
    supported_on_floor: bool = True


@dataclass
class PaintedRect:
    """Flat color patch with no depth of its own: a distractor that shares
    the occluders' contrast statistics but exhibits no depth edge."""
    x: int
    y: int
    w: int
    h: int


@dataclass
class SyntheticSceneSpec:
    height: int
    width: int
    background_depth: float
    floor_line: int
    occluders: list = field(default_factory=list)
    painted_rects: list = field(default_factory=list)
    palette_seed: int = 0
    target_cgl_area: float = 0.10

    def validate(self):
        for occ in self.occluders:
            if occ.x < 0 or occ.y < 0 or occ.x + occ.w > self.width or occ.y + occ.h > self.height:
                raise ValueError(f"occluder {occ} overflows {self.width}x{self.height} image")
            if occ.depth_offset <= 0 or occ.depth_offset >= self.background_depth:
                raise ValueError("occluder depth must be strictly in front of the background")
        for rect in self.painted_rects:
            if rect.x < 0 or rect.y < 0 or rect.x + rect.w > self.width or rect.y + rect.h > self.height:
                raise ValueError(f"painted rect {rect} overflows the image")


# ---------------------------------------------------------------------------
# masks

def boxes_to_mask(boxes, height, width, scale=4):
    """Binary mask with box interiors set, downsampled to 1/scale resolution
    by the any-in-block policy."""
    if height % scale or width % scale:
        raise ValueError(f"image dimensions must be divisible by {scale}")
    full = np.zeros((height, width), dtype=np.uint8)
    for box in boxes:
        if box.w <= 0 or box.h <= 0:
            raise ValueError(f"degenerate box {box}")
        if box.x < 0 or box.y < 0 or box.x + box.w > width or box.y + box.h > height:
            raise ValueError(f"box {box} lies outside the {width}x{height} image")
        full[box.y:box.y + box.h, box.x:box.x + box.w] = 1
    return downsample_any_block(full, scale)


def scene_to_input(scene, dtype=np.float32, standardize=True):
    """Scene image as a (3, H, W) float array.

    By default each channel is standardized per image (zero mean, unit
    variance), which makes the network insensitive to absolute palette
    brightness and keeps per-image normalization statistics comparable
    across scenes.  With standardize=False, values are scaled to [0, 1].
    """
    dtype = np.dtype(dtype)
    x = scene.image.astype(np.float64).transpose(2, 0, 1) / 255.0
    if standardize:
        mu = x.mean(axis=(1, 2), keepdims=True)
        sd = x.std(axis=(1, 2), keepdims=True)
        x = (x - mu) / (sd + 1e-6)
    return np.ascontiguousarray(x.astype(dtype))


def scene_target_mask(scene):
    return boxes_to_mask(scene.boxes, scene.height, scene.width)


# ---------------------------------------------------------------------------
# COCO-style annotations

def load_coco_annotations(path, load_images=True):
    """Read a COCO-style annotation file into a list of AnnotatedScene.

    Expects a single category; bbox entries are [x, y, w, h].  Boxes
    reaching past the image border are clipped with a warning.  Optional
    per-image keys: "depth_file" (CGLD raster or 16-bit PNG, relative to
    the annotation file) and "location" (scene family tag).
    """
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        doc = json.load(fh)
    categories = doc.get("categories", [])
    if len(categories) != 1:
        raise ValueError(f"expected exactly one category, found {len(categories)}")
    cgl_id = categories[0]["id"]

    per_image = {}
    for ann in doc.get("annotations", []):
        if ann["category_id"] != cgl_id:
            raise ValueError(f"unknown category id {ann['category_id']}")
        per_image.setdefault(ann["image_id"], []).append(ann["bbox"])

    scenes = []
    for rec in doc.get("images", []):
        h, w = rec["height"], rec["width"]
        boxes = []
        for bbox in per_image.get(rec["id"], []):
            x, y, bw, bh = (int(round(v)) for v in bbox)
            cx, cy = max(x, 0), max(y, 0)
            cw = min(x + bw, w) - cx
            ch = min(y + bh, h) - cy
            if (cx, cy, cw, ch) != (x, y, bw, bh):
                log.warning("clipped box %s to image %s in %r", bbox, (w, h), rec["file_name"])
            if cw <= 0 or ch <= 0:
                log.warning("dropped box %s fully outside image %r", bbox, rec["file_name"])
                continue
            boxes.append(CglBox(cx, cy, cw, ch))
        if load_images:
            from PIL import Image
            img_path = os.path.join(root, rec["file_name"])
            if not os.path.exists(img_path):
                raise FileNotFoundError(f"image file missing: {img_path}")
            with Image.open(img_path) as img:
                image = np.asarray(img.convert("RGB"))
        else:
            image = np.zeros((h, w, 3), dtype=np.uint8)
        depth = None
        if rec.get("depth_file"):
            depth = read_depth_raster(os.path.join(root, rec["depth_file"]))
        scenes.append(AnnotatedScene(
            image=image, boxes=boxes, depth=depth,
            name=rec["file_name"], location=rec.get("location"),
            split_tag=rec.get("split")))
    return scenes


def save_coco_dataset(scenes, out_dir):
    """Write scenes as PNG images + CGLD depth rasters + annotations.json."""
    from PIL import Image
    img_dir = os.path.join(out_dir, "images")
    depth_dir = os.path.join(out_dir, "depth")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(depth_dir, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for i, scene in enumerate(scenes):
        stem = scene.name or f"scene_{i:04d}"
        file_name = os.path.join("images", f"{stem}.png")
        Image.fromarray(scene.image).save(os.path.join(out_dir, file_name))
        rec = {"id": i + 1, "file_name": file_name,
               "height": scene.height, "width": scene.width}
        if scene.location is not None:
            rec["location"] = scene.location
        if scene.split_tag is not None:
            rec["split"] = scene.split_tag
        if scene.depth is not None:
            depth_name = os.path.join("depth", f"{stem}.cgld")
            write_depth_raster(os.path.join(out_dir, depth_name), scene.depth)
            rec["depth_file"] = depth_name
        images.append(rec)
        for box in scene.boxes:
            annotations.append({
                "id": ann_id, "image_id": i + 1,
                "bbox": [box.x, box.y, box.w, box.h],
                "area": box.w * box.h, "iscrowd": 0, "category_id": 1})
            ann_id += 1
    doc = {"images": images, "annotations": annotations,
           "categories": [{"id": 1, "name": "cgl"}]}
    ann_path = os.path.join(out_dir, "annotations.json")
    with open(ann_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return ann_path


# ---------------------------------------------------------------------------
# synthetic scenes

def _edge_boxes(occ, spec):
    """Hideout boxes straddling the qualifying edges of one occluder with a
    40/60 inside/outside split.  Pillars (h > w) yield one vertical box per
    side edge; wide low occluders yield two horizontal boxes along the top
    edge.  Unsupported (floating) occluders yield nothing."""
    if not occ.supported_on_floor:
        return []
    t = band_thickness(spec.height, spec.width, spec.target_cgl_area)
    inside = int(round(0.4 * t))
    outside = t - inside
    boxes = []
    if occ.h > occ.w:
        bh = min(occ.h, int(round(_HUMAN_RATIO * spec.height)))
        y0 = occ.y + occ.h - bh
        boxes.append(CglBox(occ.x - outside, y0, t, bh))
        boxes.append(CglBox(occ.x + occ.w - inside, y0, t, bh))
    else:
        y0 = occ.y - outside
        half = occ.w // 2
        boxes.append(CglBox(occ.x, y0, half, t))
        boxes.append(CglBox(occ.x + half, y0, occ.w - half, t))
    return boxes


def band_thickness(height, width, target_area=0.10):
    base = _BAND_RATIO * min(height, width)
    return max(3, int(round(base * target_area / 0.10)))


def _palette(palette_seed):
    rng = np.random.default_rng(np.random.SeedSequence([613, palette_seed]))
    wall = rng.integers(40, 216, size=3)
    floor = wall
    while np.abs(floor - wall).sum() < 90:
        floor = rng.integers(40, 216, size=3)
    pool = []
    while len(pool) < 4:
        c = rng.integers(30, 226, size=3)
        if np.abs(c - wall).sum() >= 90 and np.abs(c - floor).sum() >= 60:
            pool.append(c)
    return wall.astype(np.uint8), floor.astype(np.uint8), np.array(pool, dtype=np.uint8)


def generate_synthetic_scene(spec, seed):
    """Render a SyntheticSceneSpec into an AnnotatedScene with analytic depth.

    The same (spec, seed) pair always renders bit-identical output; seed
    drives only color assignment and pixel noise.
    """
    spec.validate()
    h, w = spec.height, spec.width
    wall, floor, pool = _palette(spec.palette_seed)
    rng = np.random.default_rng(np.random.SeedSequence([spec.palette_seed, seed]))

    image = np.empty((h, w, 3), dtype=np.int16)
    image[:] = wall
    image[spec.floor_line:, :] = floor
    depth = np.full((h, w), spec.background_depth, dtype=np.float64)

    # painted distractors lie flat on the wall: a color edge with no depth
    # edge and no contact-shadow seam
    for rect in spec.painted_rects:
        image[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w] = \
            pool[rng.integers(0, len(pool))]

    # far-to-near paint order; depth via min so overlap resolves to nearer.
    # Real depth edges carry a 2px contact-shadow seam straddling the
    # silhouette (1px outside, 1px inside), the RGB signature that
    # distinguishes them from painted edges.
    for occ in sorted(spec.occluders, key=lambda o: o.depth_offset):
        color = pool[rng.integers(0, len(pool))]
        y0, y1 = occ.y, occ.y + occ.h
        x0, x1 = occ.x, occ.x + occ.w
        image[max(y0 - 1, 0):min(y1 + 1, h), max(x0 - 1, 0):min(x1 + 1, w)] -= SEAM_DARKEN
        image[y0:y1, x0:x1] = color
        image[y0:y1, x0:x1] -= SEAM_DARKEN
        image[y0 + 1:y1 - 1, x0 + 1:x1 - 1] = color
        region = depth[y0:y1, x0:x1]
        np.minimum(region, spec.background_depth - occ.depth_offset, out=region)

    noise = rng.integers(-6, 7, size=image.shape)
    image = np.clip(image + noise, 0, 255).astype(np.uint8)

    boxes = []
    for occ in spec.occluders:
        boxes.extend(_edge_boxes(occ, spec))
    scene = AnnotatedScene(image=image, boxes=boxes, depth=depth,
                           location=f"family{spec.palette_seed:03d}")
    for box in scene.boxes:
        if box.x < 0 or box.y < 0 or box.x + box.w > w or box.y + box.h > h:
            raise ValueError(f"spec places box {box} outside the image")
    return scene


def random_scene_spec(family, rng, size=64, p_horizontal=0.7, p_floating=0.3,
                      target_cgl_area=0.10):
    """Sample a scene layout in the style of one location family."""
    margin = max(6, size // 10)
    floor_line = int(round(0.84 * size))
    spec = SyntheticSceneSpec(height=size, width=size, background_depth=10.0,
                              floor_line=floor_line, palette_seed=family,
                              target_cgl_area=target_cgl_area)

    pillar_left = bool(rng.integers(0, 2))
    half = size // 2
    # widest occluder either half-zone can hold without touching the border
    zone_capacity = half - 4 - margin

    def _zone(left, width_needed):
        if left:
            lo, hi = margin, half - 4 - width_needed
        else:
            lo, hi = half + 4, size - margin - width_needed
        return int(rng.integers(lo, hi + 1))

    pw = min(int(rng.integers(size // 8, size // 5 + 1)), zone_capacity)
    ph = int(rng.integers(round(0.40 * size), round(0.56 * size) + 1))
    spec.occluders.append(Occluder(
        x=_zone(pillar_left, pw), y=floor_line - ph, w=pw, h=ph,
        depth_offset=float(rng.uniform(3.5, 6.0))))

    if rng.random() < p_horizontal:
        ww = min(int(rng.integers(round(0.28 * size), round(0.40 * size) + 1)),
                 zone_capacity)
        wh = int(rng.integers(round(0.16 * size), round(0.22 * size) + 1))
        spec.occluders.append(Occluder(
            x=_zone(not pillar_left, ww), y=floor_line - wh, w=ww, h=wh,
            depth_offset=float(rng.uniform(3.5, 6.0))))

    if rng.random() < p_floating:
        fw = int(rng.integers(size // 8, size // 5 + 1))
        fh = int(rng.integers(size // 10, size // 6 + 1))
        for _ in range(10):
            fx = int(rng.integers(margin, size - margin - fw + 1))
            fy = int(rng.integers(margin, round(0.3 * size)))
            cand = Occluder(x=fx, y=fy, w=fw, h=fh,
                            depth_offset=float(rng.uniform(3.5, 6.0)),
                            supported_on_floor=False)
            if all(_rect_gap(cand, other) >= 6 for other in spec.occluders):
                spec.occluders.append(cand)
                break

    n_painted = int(rng.integers(1, 3))
    for _ in range(n_painted):
        pw = int(rng.integers(size // 8, size // 4 + 1))
        phh = int(rng.integers(size // 8, size // 4 + 1))
        for _ in range(10):
            px = int(rng.integers(2, size - 2 - pw + 1))
            py = int(rng.integers(2, floor_line - 2 - phh + 1))
            cand = PaintedRect(x=px, y=py, w=pw, h=phh)
            if all(_rect_gap(cand, occ) >= 5 for occ in spec.occluders):
                spec.painted_rects.append(cand)
                break
    return spec


def _rect_gap(a, b):
    dx = max(b.x - (a.x + a.w), a.x - (b.x + b.w))
    dy = max(b.y - (a.y + a.h), a.y - (b.y + b.h))
    return max(dx, dy)


def synthesize_dataset(count, seed, size=64, n_families=10, **spec_kwargs):
    """Generate `count` scenes spread round-robin over `n_families` palette
    and layout families.  Fully determined by (count, seed, size, families)."""
    scenes = []
    for i in range(count):
        family = i % n_families
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        spec = random_scene_spec(family, rng, size=size, **spec_kwargs)
        scene = generate_synthetic_scene(spec, seed=int(rng.integers(0, 2 ** 31)))
        scene.name = f"scene_{i:04d}"
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# splits

SPLIT_MODES = ("disjoint-locations", "partial-overlap")


def split_dataset(scenes, mode="disjoint-locations", ratio=0.8, seed=0):
    """Partition scenes into (train, test) by location family.

    disjoint-locations: no family appears in both partitions.
    partial-overlap: ~17% of the test set is drawn from train families.
    """
    if mode not in SPLIT_MODES:
        raise ValueError(f"split mode must be one of {SPLIT_MODES}")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    families = {}
    for scene in scenes:
        if scene.location is None:
            raise ValueError(f"scene {scene.name!r} carries no location tag")
        families.setdefault(scene.location, []).append(scene)
    if len(families) < 2:
        raise ValueError("need at least two location families to split")

    rng = np.random.default_rng(np.random.SeedSequence([seed, len(scenes)]))
    order = sorted(families)
    rng.shuffle(order)

    n_test_target = int(round((1.0 - ratio) * len(scenes)))
    test_families, covered = [], 0
    for fam in order:
        if covered >= n_test_target and test_families:
            break
        if len(order) - len(test_families) <= 1:
            break  # keep at least one family in train
        test_families.append(fam)
        covered += len(families[fam])

    test = [s for fam in test_families for s in families[fam]]
    train = [s for fam in order if fam not in test_families for s in families[fam]]

    if mode == "partial-overlap":
        n_overlap = int(round(0.17 / 0.83 * len(test)))
        n_overlap = min(n_overlap, len(train) - 1)
        idx = rng.choice(len(train), size=n_overlap, replace=False)
        moved = {int(i) for i in idx}
        test = test + [s for i, s in enumerate(train) if i in moved]
        train = [s for i, s in enumerate(train) if i not in moved]

    for s in train:
        s.split_tag = "train"
    for s in test:
        s.split_tag = "test"
    return train, test
