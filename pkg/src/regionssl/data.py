"""Synthetic multi-object scenes, annotation/proposal files, subset selection.

Scenes are drawn on small float32 canvases: each object is a colored shape
from a fixed palette, boxes are computed from the drawn pixels (so they are
tight by construction), and objects never overlap though they may abut.

File formats (field names are stable interfaces):

* annotations: one JSON document ``{"images": [{"id", "width", "height",
  "file"}], "annotations": [{"image_id", "bbox": [x1, y1, x2, y2],
  "category_id"}], "categories": [{"id", "name"}]}``; image files are PNGs
  relative to the annotation file.
* proposals: JSONL, one ``{"image_id", "boxes": [[x1, y1, x2, y2], ...]}``
  record per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DataError, EmptyDataset, MissingImage, ParseError,
                     SceneSpecError)
from .geometry import BBox, intersect

# (name, shape kind, RGB) -- eight visually distinct classes.
PALETTE: tuple[tuple[str, str, tuple[float, float, float]], ...] = (
    ("red-square", "square", (0.90, 0.15, 0.15)),
    ("green-circle", "circle", (0.15, 0.80, 0.20)),
    ("blue-triangle", "triangle", (0.20, 0.35, 0.95)),
    ("yellow-diamond", "diamond", (0.95, 0.85, 0.10)),
    ("magenta-plus", "plus", (0.85, 0.15, 0.85)),
    ("cyan-ring", "ring", (0.10, 0.80, 0.85)),
    ("orange-bars", "hbars", (0.95, 0.55, 0.10)),
    ("white-checker", "checker", (0.92, 0.92, 0.92)),
)


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean (size, size) stencil of one shape kind."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2
    r = size / 2
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        return (xx - c) ** 2 + (yy - c) ** 2 <= r ** 2
    if kind == "triangle":
        return np.abs(xx - c) <= (yy / size) * c
    if kind == "diamond":
        return np.abs(xx - c) + np.abs(yy - c) <= r
    if kind == "plus":
        arm = size / 3
        return ((np.abs(xx - c) <= arm / 2) | (np.abs(yy - c) <= arm / 2))
    if kind == "ring":
        d2 = (xx - c) ** 2 + (yy - c) ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbars":
        band = max(size // 5, 1)
        return (yy.astype(int) // band) % 2 == 0
    if kind == "checker":
        cell = max(size // 3, 1)
        return ((xx.astype(int) // cell) + (yy.astype(int) // cell)) % 2 == 0
    raise SceneSpecError(f"unknown shape kind {kind!r}")


@dataclass
class AnnotatedImage:
    """An image with ground-truth boxes and class ids."""

    image: np.ndarray
    objects: list[tuple[BBox, int]]
    image_id: str


@dataclass
class Dataset:
    """In-memory dataset: annotated images plus a category table."""

    images: list[AnnotatedImage]
    categories: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.by_id = {im.image_id: im for im in self.images}

    def __len__(self) -> int:
        return len(self.images)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for im in self.images:
            for _, cls in im.objects:
                counts[cls] = counts.get(cls, 0) + 1
        return counts


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for synthetic scene generation."""

    canvas_size: int = 64
    object_count: tuple[int, int] = (2, 4)
    n_classes: int = 8
    class_weights: tuple[float, ...] | None = None
    size_range: tuple[float, float] = (0.2, 0.4)
    background: str = "noise"       # "noise", "gray", or "black"
    color_jitter: float = 0.1

    def __post_init__(self):
        lo, hi = self.object_count
        if not (1 <= lo <= hi):
            raise SceneSpecError("object_count range must satisfy 1 <= lo <= hi")
        if not (1 <= self.n_classes <= len(PALETTE)):
            raise SceneSpecError(f"n_classes must be in [1, {len(PALETTE)}]")
        if self.class_weights is not None and len(self.class_weights) != self.n_classes:
            raise SceneSpecError("class_weights length must equal n_classes")
        slo, shi = self.size_range
        if not (0.0 < slo <= shi < 1.0):
            raise SceneSpecError("size_range must lie inside (0, 1)")
        if self.background not in ("noise", "gray", "black"):
            raise SceneSpecError(f"unknown background {self.background!r}")
        if self.canvas_size < 16:
            raise SceneSpecError("canvas_size must be at least 16")


def render_object(class_id: int, size: int, rng: np.random.Generator,
                  color_jitter: float = 0.1) -> np.ndarray:
    """(size, size, 3) float32 patch of one class on a transparent-black field."""
    name, kind, rgb = PALETTE[class_id]
    stencil = shape_mask(kind, size)
    gain = 1.0 - color_jitter * float(rng.uniform())
    patch = np.zeros((size, size, 3), dtype=np.float32)
    patch[stencil] = np.asarray(rgb, dtype=np.float32) * np.float32(gain)
    return patch


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.canvas_size
    if spec.background == "black":
        return np.zeros((s, s, 3), dtype=np.float32)
    if spec.background == "gray":
        return np.full((s, s, 3), 0.12, dtype=np.float32)
    return rng.uniform(0.0, 0.2, size=(s, s, 3)).astype(np.float32)


def synth_scene(rng: np.random.Generator, spec: SceneSpec,
                image_id: str = "scene") -> AnnotatedImage:
    """Draw one scene: non-overlapping (possibly abutting) shapes, tight boxes."""
    canvas = _background(spec, rng)
    s = spec.canvas_size
    lo, hi = spec.object_count
    target = int(rng.integers(lo, hi + 1))
    weights = spec.class_weights
    placed_boxes: list[BBox] = []
    objects: list[tuple[BBox, int]] = []
    for _ in range(target):
        ok = False
        for _attempt in range(100):
            frac = float(rng.uniform(*spec.size_range))
            size = max(int(round(frac * s)), 6)
            x0 = int(rng.integers(0, s - size + 1))
            y0 = int(rng.integers(0, s - size + 1))
            cand = BBox(x0, y0, x0 + size, y0 + size)
            if all(intersect(cand, b) is None for b in placed_boxes):
                ok = True
                break
        if not ok:
            break
        cls = int(rng.choice(spec.n_classes, p=weights))
        patch = render_object(cls, size, rng, spec.color_jitter)
        stencil = patch.any(axis=2)
        region = canvas[y0:y0 + size, x0:x0 + size]
        region[stencil] = patch[stencil]
        rows = np.flatnonzero(stencil.any(axis=1))
        cols = np.flatnonzero(stencil.any(axis=0))
        tight = BBox(float(x0 + cols[0]), float(y0 + rows[0]),
                     float(x0 + cols[-1] + 1), float(y0 + rows[-1] + 1))
        placed_boxes.append(cand)
        objects.append((tight, cls))
    if len(objects) < lo:
        raise SceneSpecError(
            f"could not place the minimum of {lo} objects on a "
            f"{s}x{s} canvas (placed {len(objects)})")
    return AnnotatedImage(canvas, objects, image_id)


def make_dataset(rng: np.random.Generator, spec: SceneSpec, count: int,
                 id_prefix: str = "scene") -> Dataset:
    images = [synth_scene(rng, spec, f"{id_prefix}-{i:05d}") for i in range(count)]
    cats = [(i, PALETTE[i][0]) for i in range(spec.n_classes)]
    return Dataset(images, cats)


# ---------------------------------------------------------------------------
# proposal stub
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Sliding-grid proposal stub settings."""

    cell_sizes: tuple[int, ...] = (32,)
    stride: int | None = None       # defaults to the cell size (no overlap)
    gt_jitter: float = 0.0          # fractional jitter for ground-truth copies


def grid_proposals(image: np.ndarray, spec: GridSpec | None = None,
                   objects: list[tuple[BBox, int]] | None = None,
                   rng: np.random.Generator | None = None) -> list[BBox]:
    """Multi-scale sliding-grid boxes plus jittered ground-truth copies."""
    spec = spec or GridSpec()
    h, w = image.shape[:2]
    boxes: list[BBox] = []
    for cell in spec.cell_sizes:
        if cell > min(h, w):
            continue
        stride = spec.stride or cell
        for y0 in range(0, h - cell + 1, stride):
            for x0 in range(0, w - cell + 1, stride):
                boxes.append(BBox(x0, y0, x0 + cell, y0 + cell))
    if objects:
        for box, _cls in objects:
            if spec.gt_jitter > 0 and rng is not None:
                jx = float(rng.uniform(-1, 1)) * spec.gt_jitter * box.width
                jy = float(rng.uniform(-1, 1)) * spec.gt_jitter * box.height
                x1 = min(max(box.x1 + jx, 0.0), w - 1.0)
                y1 = min(max(box.y1 + jy, 0.0), h - 1.0)
                x2 = max(min(box.x2 + jx, float(w)), x1 + 1.0)
                y2 = max(min(box.y2 + jy, float(h)), y1 + 1.0)
                boxes.append(BBox(x1, y1, x2, y2))
            else:
                boxes.append(box)
    return boxes


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write PNG images plus the annotation JSON; returns the JSON path."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images_meta, annotations = [], []
    for im in dataset.images:
        fname = f"images/{im.image_id}.png"
        arr = np.clip(np.round(im.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out_dir / fname)
        h, w = im.image.shape[:2]
        images_meta.append({"id": im.image_id, "width": w, "height": h,
                            "file": fname})
        for box, cls in im.objects:
            annotations.append({"image_id": im.image_id,
                                "bbox": [float(v) for v in box.as_tuple()],
                                "category_id": int(cls)})
    doc = {"images": images_meta, "annotations": annotations,
           "categories": [{"id": i, "name": n} for i, n in dataset.categories]}
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _parse_box(raw, where: str, line: int | None = None) -> BBox:
    if (not isinstance(raw, (list, tuple))) or len(raw) != 4:
        raise ParseError(f"{where}: bbox must be [x1, y1, x2, y2]", line)
    x1, y1, x2, y2 = (float(v) for v in raw)
    if not (x1 < x2 and y1 < y2):
        raise ParseError(f"{where}: degenerate bbox {raw}", line)
    return BBox(x1, y1, x2, y2)


def load_annotations(path, load_images: bool = True) -> Dataset:
    """Parse and validate an annotation JSON; images load from sibling PNGs."""
    from PIL import Image

    path = Path(path)
    try:
        doc = json.loads(path.read_text() or "{}")
    except json.JSONDecodeError as e:
        raise ParseError(f"not valid JSON: {e}", getattr(e, "lineno", None))
    images: dict[str, AnnotatedImage] = {}
    order: list[str] = []
    for i, rec in enumerate(doc.get("images", [])):
        img_id = str(rec.get("id"))
        if img_id in images:
            raise ParseError(f"images[{i}]: duplicate id {img_id!r}")
        w, h = int(rec.get("width", 0)), int(rec.get("height", 0))
        if w <= 0 or h <= 0:
            raise ParseError(f"images[{i}]: bad width/height")
        if load_images:
            fpath = path.parent / rec.get("file", "")
            if not fpath.is_file():
                raise MissingImage(f"images[{i}]: file {fpath} not found")
            arr = np.asarray(Image.open(fpath).convert("RGB"), dtype=np.float32) / 255.0
        else:
            arr = np.zeros((h, w, 3), dtype=np.float32)
        images[img_id] = AnnotatedImage(arr, [], img_id)
        order.append(img_id)
    for i, rec in enumerate(doc.get("annotations", [])):
        img_id = str(rec.get("image_id"))
        if img_id not in images:
            raise MissingImage(f"annotations[{i}]: unknown image id {img_id!r}")
        box = _parse_box(rec.get("bbox"), f"annotations[{i}]")
        im = images[img_id]
        h, w = im.image.shape[:2]
        if box.x2 > w or box.y2 > h or box.x1 < 0 or box.y1 < 0:
            raise ParseError(f"annotations[{i}]: bbox exceeds image bounds")
        cls = int(rec.get("category_id", -1))
        im.objects.append((box, cls))
    cats = [(int(c["id"]), str(c.get("name", c["id"])))
            for c in doc.get("categories", [])]
    return Dataset([images[i] for i in order], cats)


def save_proposals(proposals: dict[str, list[BBox]], path) -> Path:
    path = Path(path)
    with path.open("w") as f:
        for img_id in proposals:
            rec = {"image_id": img_id,
                   "boxes": [list(b.as_tuple()) for b in proposals[img_id]]}
            f.write(json.dumps(rec) + "\n")
    return path


def load_proposals(path) -> dict[str, list[BBox]]:
    """Parse a proposal JSONL file; malformed records name their line."""
    path = Path(path)
    out: dict[str, list[BBox]] = {}
    with path.open() as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"not valid JSON: {e}", lineno)
            if "image_id" not in rec or "boxes" not in rec:
                raise ParseError("record needs image_id and boxes", lineno)
            img_id = str(rec["image_id"])
            boxes = [_parse_box(b, f"boxes[{j}]", lineno)
                     for j, b in enumerate(rec["boxes"])]
            out[img_id] = boxes
    return out


def resolve_proposals(dataset: Dataset, proposals: dict[str, list[BBox]],
                      grid: GridSpec | None = None) -> dict[str, list[BBox]]:
    """Check proposal ids against a dataset; stub in grid boxes where absent."""
    unknown = set(proposals) - set(dataset.by_id)
    if unknown:
        raise MissingImage(f"proposals reference unknown image ids: "
                           f"{sorted(unknown)[:5]}")
    resolved = {}
    for im in dataset.images:
        boxes = proposals.get(im.image_id)
        if not boxes:
            boxes = grid_proposals(im.image, grid, im.objects)
        if not boxes:
            raise DataError(f"no proposals available for image {im.image_id}")
        resolved[im.image_id] = boxes
    return resolved


# ---------------------------------------------------------------------------
# reference-capped subset selection
# ---------------------------------------------------------------------------

def mini_subset_select(source_ann: Dataset, reference_ann: Dataset,
                       rng: np.random.Generator | None = None):
    """Greedy seeded scan of source images under reference class-count caps.

    An image is accepted iff (a) it has at least one object of a class present
    in the reference set and (b) accepting it keeps, for every shared class,
    the selected-object count at or below that class's total count in the
    reference set.  Returns (selected ids, per-class report).
    """
    if len(source_ann) == 0:
        raise EmptyDataset("source annotation set holds no images")
    rng = rng or np.random.default_rng(0)
    caps = reference_ann.class_counts()
    order = list(range(len(source_ann.images)))
    rng.shuffle(order)
    running: dict[int, int] = {c: 0 for c in caps}
    selected: list[str] = []
    for i in order:
        im = source_ann.images[i]
        img_counts: dict[int, int] = {}
        for _, cls in im.objects:
            img_counts[cls] = img_counts.get(cls, 0) + 1
        shared = {c: n for c, n in img_counts.items() if c in caps}
        if not shared:
            continue
        if any(running[c] + n > caps[c] for c, n in shared.items()):
            continue
        for c, n in shared.items():
            running[c] += n
        selected.append(im.image_id)
    report = {c: {"selected": running[c], "cap": caps[c]} for c in sorted(caps)}
    return selected, report
