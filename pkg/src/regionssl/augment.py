"""Region-level augmentations, view construction, and copy-paste composition.

Three proposal-driven augmentations:

* proposal cutout: erases rectangles inside each proposal that keep the
  proposal's aspect ratio, with an area fraction drawn from a configured
  range; overlaps onto smaller proposals beyond a coverage threshold are
  restored.
* proposal border mask: pastes background content from immediately outside a
  proposal over a strip just inside one of its edges (or, in ``expand`` mode,
  grows the RoI box outward instead of touching pixels).
* restricted box jitter: rescales/shifts a box and intersects with the
  original, so the output never grows.

Views: the full image resized to 224, a random resized crop at 224, and the
crop downsampled exactly 2x to 112, with proposals remapped consistently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConfigError, NoSurvivingProposals, ShapeMismatch
from .geometry import (BBox, Shift, box_pixel_slices, coverage_fraction,
                       intersect, pixel_span, remap_box_to_view)

VIEW_SIZE = 224


@dataclass(frozen=True)
class AugConfig:
    """Ranges and switches for the region-level augmentations."""

    prc_range: tuple[float, float] = (0.2, 0.5)
    prc_cover_threshold: float = 0.3
    prm_scale_range: tuple[float, float] = (0.2, 0.6)
    prm_aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    rbj_scale_range: tuple[float, float] = (0.8, 1.0)
    rbj_shift_frac: float = 0.1
    cutouts_per_proposal: int = 1
    fill_value: float = 0.0
    prm_mode: str = "paste"          # or "expand"
    min_visible: float = 0.5
    crop_scale_range: tuple[float, float] = (0.4, 1.0)
    crop_aspect_range: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        for name in ("prc_range", "prm_scale_range", "rbj_scale_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigError(f"{name} must lie within (0, 1]")
        lo, hi = self.prc_range
        if hi >= 1.0:
            raise ConfigError("prc_range must stay inside (0, 1)")
        alo, ahi = self.prm_aspect_range
        if not (alo <= 1.0 <= ahi):
            raise ConfigError("prm_aspect_range must straddle 1")
        if not (0.0 <= self.rbj_shift_frac <= 0.5):
            raise ConfigError("rbj_shift_frac must lie in [0, 0.5]")
        if self.cutouts_per_proposal < 1:
            raise ConfigError("cutouts_per_proposal must be >= 1")
        if self.prm_mode not in ("paste", "expand"):
            raise ConfigError(f"unknown prm_mode {self.prm_mode!r}")


@dataclass
class CutoutRecord:
    """One placed cutout: the erased rectangle and any restored overlaps."""

    proposal_index: int
    rect: BBox
    restored: list[BBox] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"proposal_index": self.proposal_index,
                "rect": list(self.rect.as_tuple()),
                "restored": [list(r.as_tuple()) for r in self.restored]}


@dataclass
class PrmRecord:
    """One applied border mask: straddling rectangle, direction, copy strips."""

    proposal_index: int
    rect: BBox
    direction: str
    inner: BBox
    source: BBox

    def to_json(self) -> dict:
        return {"proposal_index": self.proposal_index,
                "rect": list(self.rect.as_tuple()),
                "direction": self.direction,
                "inner": list(self.inner.as_tuple()),
                "source": list(self.source.as_tuple())}


@dataclass
class ViewSet:
    """The three augmented views with per-view proposal coordinates."""

    x1: np.ndarray
    x2: np.ndarray
    x2s: np.ndarray
    boxes_v1: list[BBox]
    boxes_v2: list[BBox]
    boxes_v2s: list[BBox]
    crop: BBox
    surviving: list[int]


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return kernels.bilinear_resize(image, out_h, out_w)


def _sample_crop(w: int, h: int, rng: np.random.Generator,
                 cfg: AugConfig) -> BBox:
    """Random resized crop box with integral pixel bounds (10 tries, then full)."""
    area = w * h
    lo, hi = cfg.crop_scale_range
    alo, ahi = cfg.crop_aspect_range
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(alo), math.log(ahi)))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            cx = int(rng.integers(0, w - cw + 1))
            cy = int(rng.integers(0, h - ch + 1))
            return BBox(cx, cy, cx + cw, cy + ch)
    return BBox(0, 0, w, h)


def make_views(image: np.ndarray, proposals: list[BBox],
               rng: np.random.Generator, cfg: AugConfig | None = None,
               out_size: int = VIEW_SIZE) -> ViewSet:
    """Build the three views and remap proposals consistently across them.

    A proposal dropped by the crop (visible fraction below ``cfg.min_visible``)
    is removed from every view, so the surviving set is shared.  Raises
    NoSurvivingProposals when the crop keeps none of them.
    """
    cfg = cfg or AugConfig()
    h, w = image.shape[:2]
    full = BBox(0, 0, w, h)
    x1 = resize_image(image, out_size, out_size)
    crop = _sample_crop(w, h, rng, cfg)
    rs, cs = box_pixel_slices(crop, w, h)
    x2 = resize_image(image[rs, cs], out_size, out_size)
    x2s = kernels.mean_downsample2(x2)

    boxes_v1, boxes_v2, boxes_v2s, surviving = [], [], [], []
    for i, b in enumerate(proposals):
        v2 = remap_box_to_view(b, crop, out_size, out_size, cfg.min_visible)
        if v2 is None:
            continue
        v1 = remap_box_to_view(b, full, out_size, out_size, min_visible=0.0)
        boxes_v1.append(v1)
        boxes_v2.append(v2)
        boxes_v2s.append(v2.scaled(0.5))
        surviving.append(i)
    if proposals and not surviving:
        raise NoSurvivingProposals("the sampled crop dropped every proposal")
    return ViewSet(x1, x2, x2s, boxes_v1, boxes_v2, boxes_v2s, crop, surviving)


# ---------------------------------------------------------------------------
# proposal-based random cutout
# ---------------------------------------------------------------------------

def _paint(image: np.ndarray, rect: BBox, value) -> None:
    rows, cols = box_pixel_slices(rect, image.shape[1], image.shape[0])
    image[rows, cols] = value


def _copy_region(dst: np.ndarray, src: np.ndarray, rect: BBox) -> None:
    rows, cols = box_pixel_slices(rect, dst.shape[1], dst.shape[0])
    dst[rows, cols] = src[rows, cols]


def prc(image: np.ndarray, proposals: list[BBox], rng: np.random.Generator,
        cfg: AugConfig | None = None,
        fill_value: float | None = None) -> tuple[np.ndarray, list[CutoutRecord]]:
    """Cut out proposal-shaped rectangles, large proposals first.

    Every cutout keeps its proposal's aspect ratio with an area fraction from
    ``cfg.prc_range``.  When a cutout covers a smaller (later-processed)
    proposal by more than ``cfg.prc_cover_threshold``, the overlap is restored
    from the original pixels.  Works on (H, W, C) images and on (H, W) masks.
    """
    cfg = cfg or AugConfig()
    fill = cfg.fill_value if fill_value is None else fill_value
    out = image.copy()
    if not proposals:
        return out, []
    order = sorted(range(len(proposals)),
                   key=lambda i: (-proposals[i].area, i))
    records: list[CutoutRecord] = []
    for pos, idx in enumerate(order):
        box = proposals[idx]
        for _ in range(cfg.cutouts_per_proposal):
            frac = float(rng.uniform(*cfg.prc_range))
            side = math.sqrt(frac)
            cw = box.width * side
            ch = box.height * side
            rx = box.x1 + float(rng.uniform(0.0, box.width - cw))
            ry = box.y1 + float(rng.uniform(0.0, box.height - ch))
            rect = BBox(rx, ry, rx + cw, ry + ch)
            _paint(out, rect, fill)
            record = CutoutRecord(idx, rect)
            for later in order[pos + 1:]:
                small = proposals[later]
                if coverage_fraction(rect, small) > cfg.prc_cover_threshold:
                    overlap = intersect(rect, small)
                    if overlap is not None:
                        _copy_region(out, image, overlap)
                        record.restored.append(overlap)
            records.append(record)
    return out, records


# ---------------------------------------------------------------------------
# proposal-based border mask
# ---------------------------------------------------------------------------

_DIRECTIONS = ("up", "down", "left", "right")


def _prm_geometry(box: BBox, rw: float, rh: float, direction: str,
                  u: float, img_w: int, img_h: int):
    """Rect / inner strip / source strip for one direction, or None if infeasible."""
    w, h = box.width, box.height
    if direction in ("up", "down"):
        if rw > w or rh / 2 > h:
            return None
        rx = box.x1 + u * (w - rw)
        if direction == "up":
            if box.y1 - rh / 2 < 0:
                return None
            rect = BBox(rx, box.y1 - rh / 2, rx + rw, box.y1 + rh / 2)
            inner = BBox(rx, box.y1, rx + rw, box.y1 + rh / 2)
            source = BBox(rx, box.y1 - rh / 2, rx + rw, box.y1)
        else:
            if box.y2 + rh / 2 > img_h:
                return None
            rect = BBox(rx, box.y2 - rh / 2, rx + rw, box.y2 + rh / 2)
            inner = BBox(rx, box.y2 - rh / 2, rx + rw, box.y2)
            source = BBox(rx, box.y2, rx + rw, box.y2 + rh / 2)
    else:
        if rh > h or rw / 2 > w:
            return None
        ry = box.y1 + u * (h - rh)
        if direction == "left":
            if box.x1 - rw / 2 < 0:
                return None
            rect = BBox(box.x1 - rw / 2, ry, box.x1 + rw / 2, ry + rh)
            inner = BBox(box.x1, ry, box.x1 + rw / 2, ry + rh)
            source = BBox(box.x1 - rw / 2, ry, box.x1, ry + rh)
        else:
            if box.x2 + rw / 2 > img_w:
                return None
            rect = BBox(box.x2 - rw / 2, ry, box.x2 + rw / 2, ry + rh)
            inner = BBox(box.x2 - rw / 2, ry, box.x2, ry + rh)
            source = BBox(box.x2, ry, box.x2 + rw / 2, ry + rh)
    return rect, inner, source


def _prm_apply(image: np.ndarray, inner: BBox, direction: str) -> bool:
    """Copy-shift the adjacent outside strip over the inner strip, in place."""
    img_h, img_w = image.shape[:2]
    r0, r1 = pixel_span(inner.y1, inner.y2, img_h)
    c0, c1 = pixel_span(inner.x1, inner.x2, img_w)
    n_r, n_c = r1 - r0, c1 - c0
    if n_r <= 0 or n_c <= 0:
        return False
    if direction == "up":
        if r0 - n_r < 0:
            return False
        image[r0:r1, c0:c1] = image[r0 - n_r:r0, c0:c1]
    elif direction == "down":
        if r1 + n_r > img_h:
            return False
        image[r0:r1, c0:c1] = image[r1:r1 + n_r, c0:c1]
    elif direction == "left":
        if c0 - n_c < 0:
            return False
        image[r0:r1, c0:c1] = image[r0:r1, c0 - n_c:c0]
    else:
        if c1 + n_c > img_w:
            return False
        image[r0:r1, c0:c1] = image[r0:r1, c1:c1 + n_c]
    return True


def _prm_dims(box: BBox, rng: np.random.Generator,
              cfg: AugConfig) -> tuple[float, float]:
    s = float(rng.uniform(*cfg.prm_scale_range))
    a = float(rng.uniform(*cfg.prm_aspect_range))
    area = s * box.area
    return math.sqrt(area * a), math.sqrt(area / a)


def prm(image: np.ndarray, proposals: list[BBox], rng: np.random.Generator,
        cfg: AugConfig | None = None) -> tuple[np.ndarray, list[PrmRecord]]:
    """Paste adjacent background over a strip inside one edge of each proposal.

    Per proposal one rectangle (area fraction from ``prm_scale_range``, aspect
    from ``prm_aspect_range``) straddles an edge picked uniformly among the
    feasible directions; the half inside the box is overwritten with the
    content immediately outside in that direction.  Proposals flush against all
    image edges, or too small to rasterize a strip, are left unchanged.
    """
    cfg = cfg or AugConfig()
    out = image.copy()
    records: list[PrmRecord] = []
    img_h, img_w = image.shape[:2]
    for idx, box in enumerate(proposals):
        rw, rh = _prm_dims(box, rng, cfg)
        u = float(rng.uniform())
        candidates = []
        for direction in _DIRECTIONS:
            geo = _prm_geometry(box, rw, rh, direction, u, img_w, img_h)
            if geo is not None:
                candidates.append((direction, geo))
        if not candidates:
            continue
        direction, (rect, inner, source) = \
            candidates[int(rng.integers(len(candidates)))]
        if _prm_apply(out, inner, direction):
            records.append(PrmRecord(idx, rect, direction, inner, source))
    return out, records


def prm_expand_boxes(boxes: list[BBox], rng: np.random.Generator,
                     cfg: AugConfig, img_w: int, img_h: int) -> list[BBox]:
    """Alternative reading of the border mask: grow each RoI outward instead.

    Uses the same strip-dimension draws as :func:`prm` but returns boxes
    enlarged by the outside half of the rectangle, leaving pixels untouched.
    """
    grown: list[BBox] = []
    for box in boxes:
        rw, rh = _prm_dims(box, rng, cfg)
        _ = rng.uniform()  # placement draw, unused but keeps streams aligned
        candidates = []
        if box.y1 - rh / 2 >= 0:
            candidates.append(BBox(box.x1, box.y1 - rh / 2, box.x2, box.y2))
        if box.y2 + rh / 2 <= img_h:
            candidates.append(BBox(box.x1, box.y1, box.x2, box.y2 + rh / 2))
        if box.x1 - rw / 2 >= 0:
            candidates.append(BBox(box.x1 - rw / 2, box.y1, box.x2, box.y2))
        if box.x2 + rw / 2 <= img_w:
            candidates.append(BBox(box.x1, box.y1, box.x2 + rw / 2, box.y2))
        if not candidates:
            grown.append(box)
            continue
        grown.append(candidates[int(rng.integers(len(candidates)))])
    return grown


# ---------------------------------------------------------------------------
# restricted box jitter
# ---------------------------------------------------------------------------

def rbj(box: BBox, rng: np.random.Generator,
        cfg: AugConfig | None = None) -> BBox:
    """Jitter a box by scaling and center shift, clipped to stay inside it."""
    cfg = cfg or AugConfig()
    sw = float(rng.uniform(*cfg.rbj_scale_range))
    sh = float(rng.uniform(*cfg.rbj_scale_range))
    dx = float(rng.uniform(-1.0, 1.0)) * cfg.rbj_shift_frac * box.width
    dy = float(rng.uniform(-1.0, 1.0)) * cfg.rbj_shift_frac * box.height
    cx, cy = box.center
    nw = box.width * sw
    nh = box.height * sh
    jittered = BBox(cx + dx - nw / 2, cy + dy - nh / 2,
                    cx + dx + nw / 2, cy + dy + nh / 2)
    clipped = intersect(jittered, box)
    # Non-empty by the config bound shift_frac <= 0.5 <= (1 + scale_min) / 2.
    return clipped if clipped is not None else box


# ---------------------------------------------------------------------------
# foreground mask and composition
# ---------------------------------------------------------------------------

def build_foreground_mask(boxes: list[BBox], w: int, h: int) -> np.ndarray:
    """(H, W) uint8 mask: 1 where a pixel center falls inside any box."""
    mask = np.zeros((h, w), dtype=np.uint8)
    for b in boxes:
        rows, cols = box_pixel_slices(b, w, h)
        mask[rows, cols] = 1
    return mask


def compose(x2: np.ndarray, m: np.ndarray, xb: np.ndarray,
            m_hat: np.ndarray, t: Shift) -> np.ndarray:
    """Copy-paste composition: shifted foreground of x2 over background xb.

    ``x3(p) = x2(p - t)`` where ``m_hat(p) = 1`` and ``x3(p) = xb(p)``
    elsewhere; a bit-exact two-branch copy, which requires an integral shift.
    ``m`` is the unshifted foreground mask and must share the mask shape.
    """
    if x2.shape != xb.shape:
        raise ShapeMismatch(f"foreground {x2.shape} vs background {xb.shape}")
    if m.shape != x2.shape[:2] or m_hat.shape != x2.shape[:2]:
        raise ShapeMismatch("masks must match the image spatial shape")
    if not t.is_integral():
        raise ValueError("composition onto the pixel grid needs an integer shift")
    tx, ty = int(round(t.tx)), int(round(t.ty))
    h, w = m_hat.shape
    shifted = np.zeros_like(x2)
    dr0, dr1 = max(ty, 0), min(h + ty, h)
    dc0, dc1 = max(tx, 0), min(w + tx, w)
    if dr0 < dr1 and dc0 < dc1:
        shifted[dr0:dr1, dc0:dc1] = x2[dr0 - ty:dr1 - ty, dc0 - tx:dc1 - tx]
    sel = m_hat.astype(bool)
    if x2.ndim == 3:
        sel = sel[:, :, None]
    return np.where(sel, shifted, xb)
