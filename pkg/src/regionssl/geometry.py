"""Axis-aligned box, mask, and shift arithmetic shared by every other module.

Box coordinates are continuous (sub-pixel), origin at the top-left corner,
``(x1, y1)`` inclusive-ish toward smaller coordinates and ``(x2, y2)`` the far
edge.  Rasterization to pixels happens only where masks are built, using the
"pixel center inside box" rule: pixel ``(row r, col c)`` has its center at
``(c + 0.5, r + 0.5)`` and belongs to a box iff ``x1 <= c+0.5 < x2`` and
``y1 <= r+0.5 < y2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, EmptyProposalSet


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DegenerateBox(f"box has non-positive extent: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def shifted(self, shift: "Shift") -> "BBox":
        return BBox(self.x1 + shift.tx, self.y1 + shift.ty,
                    self.x2 + shift.tx, self.y2 + shift.ty)

    def scaled(self, sx: float, sy: float | None = None) -> "BBox":
        sy = sx if sy is None else sy
        return BBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)


@dataclass(frozen=True)
class Shift:
    """Pixel offset applied uniformly to a set of boxes."""

    tx: float
    ty: float

    def is_integral(self) -> bool:
        return self.tx == round(self.tx) and self.ty == round(self.ty)


def intersect(a: BBox, b: BBox) -> BBox | None:
    """Intersection box, or None when the boxes do not overlap."""
    x1 = max(a.x1, b.x1)
    y1 = max(a.y1, b.y1)
    x2 = min(a.x2, b.x2)
    y2 = min(a.y2, b.y2)
    if x1 >= x2 or y1 >= y2:
        return None
    return BBox(x1, y1, x2, y2)


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area, in [0, 1]."""
    inter = intersect(a, b)
    if inter is None:
        return 0.0
    ia = inter.area
    return ia / (a.area + b.area - ia)


def coverage_fraction(region: BBox, proposal: BBox) -> float:
    """Fraction of ``proposal``'s area covered by ``region``, in [0, 1]."""
    inter = intersect(region, proposal)
    if inter is None:
        return 0.0
    return inter.area / proposal.area


def clamp_box(b: BBox, w: float, h: float) -> BBox:
    """Clip a box to [0, w] x [0, h]; raises DegenerateBox when nothing is left."""
    x1 = min(max(b.x1, 0.0), w)
    y1 = min(max(b.y1, 0.0), h)
    x2 = min(max(b.x2, 0.0), w)
    y2 = min(max(b.y2, 0.0), h)
    if x1 >= x2 or y1 >= y2:
        raise DegenerateBox(f"box {b} is empty after clipping to {w}x{h}")
    return BBox(x1, y1, x2, y2)


def remap_box_to_view(b: BBox, crop: BBox, out_w: float, out_h: float,
                      min_visible: float = 0.5) -> BBox | None:
    """Map a source-image box into crop-local coordinates scaled to an output size.

    The box is intersected with the crop, translated so the crop origin becomes
    (0, 0), and scaled by ``out / crop`` per axis.  Returns None (dropped) when
    the visible-area fraction of the box falls below ``min_visible``.
    """
    inter = intersect(b, crop)
    if inter is None:
        return None
    if inter.area / b.area < min_visible:
        return None
    sx = out_w / crop.width
    sy = out_h / crop.height
    # Clamp away float fuzz: the intersection lies inside the crop, so the
    # remapped box must lie inside [0, out_w] x [0, out_h] exactly.
    return BBox(max((inter.x1 - crop.x1) * sx, 0.0),
                max((inter.y1 - crop.y1) * sy, 0.0),
                min((inter.x2 - crop.x1) * sx, out_w),
                min((inter.y2 - crop.y1) * sy, out_h))


def invert_view_remap(b: BBox, crop: BBox, out_w: float, out_h: float) -> BBox:
    """Inverse of :func:`remap_box_to_view` for boxes fully inside the view."""
    sx = crop.width / out_w
    sy = crop.height / out_h
    return BBox(b.x1 * sx + crop.x1, b.y1 * sy + crop.y1,
                b.x2 * sx + crop.x1, b.y2 * sy + crop.y1)


def sample_shared_shift(boxes: list[BBox], w: float, h: float,
                        rng: np.random.Generator,
                        integer: bool = False) -> Shift:
    """Draw one shift that keeps every box inside [0, w] x [0, h].

    The feasible range is ``tx in [-min_i x1_i, w - max_i x2_i]`` and the
    analogous interval for ty; the draw is uniform over it.  With
    ``integer=True`` the draw is uniform over the integral offsets in the same
    interval (composition onto a pixel grid needs whole-pixel shifts).
    """
    if not boxes:
        raise EmptyProposalSet("cannot sample a shift for zero boxes")
    lo_x = -min(b.x1 for b in boxes)
    hi_x = w - max(b.x2 for b in boxes)
    lo_y = -min(b.y1 for b in boxes)
    hi_y = h - max(b.y2 for b in boxes)
    min_x1, max_x2 = min(b.x1 for b in boxes), max(b.x2 for b in boxes)
    min_y1, max_y2 = min(b.y1 for b in boxes), max(b.y2 for b in boxes)

    def fit(t: float, low: float, high: float, bound: float,
            unit: float) -> float:
        # Float addition may overshoot the bound by an ulp; nudge back in.
        while low + t < 0 and t < bound:
            t = t + unit if unit else math.nextafter(t, math.inf)
        while high + t > bound and t > -bound:
            t = t - unit if unit else math.nextafter(t, -math.inf)
        return t

    if integer:
        def draw(lo: float, hi: float) -> float:
            lo_i = math.ceil(lo - 1e-9)
            hi_i = math.floor(hi + 1e-9)
            if hi_i <= lo_i:
                # Degenerate-to-empty after rounding: 0 is always feasible
                # for in-bounds boxes.
                return float(min(max(0, lo_i), hi_i)) if hi_i >= lo_i else 0.0
            return float(rng.integers(lo_i, hi_i + 1))
        tx = fit(draw(lo_x, hi_x), min_x1, max_x2, w, 1.0)
        ty = fit(draw(lo_y, hi_y), min_y1, max_y2, h, 1.0)
    else:
        tx = lo_x if hi_x <= lo_x else float(rng.uniform(lo_x, hi_x))
        ty = lo_y if hi_y <= lo_y else float(rng.uniform(lo_y, hi_y))
        tx = fit(tx, min_x1, max_x2, w, 0.0)
        ty = fit(ty, min_y1, max_y2, h, 0.0)
    return Shift(tx, ty)


def pixel_span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Index range [start, stop) of pixels whose centers fall in [lo, hi).

    ``limit`` clips the range to a row/column count.  May be empty.
    """
    start = max(int(math.ceil(lo - 0.5)), 0)
    stop = min(int(math.ceil(hi - 0.5)), limit)
    return start, max(stop, start)


def box_pixel_slices(b: BBox, w: int, h: int) -> tuple[slice, slice]:
    """(row, col) slices of the pixels whose centers lie inside the box."""
    c0, c1 = pixel_span(b.x1, b.x2, w)
    r0, r1 = pixel_span(b.y1, b.y2, h)
    return slice(r0, r1), slice(c0, c1)
