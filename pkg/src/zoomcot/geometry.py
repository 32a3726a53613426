"""Axis-aligned box arithmetic and coordinate transforms.

Boxes use half-open [x1, x2) x [y1, y2) semantics: area of a pixel box is
(x2 - x1) * (y2 - y1) and shared edges never double-count. Ratio boxes live
in [0, 1]^4 on the current view; pixel boxes carry the frame they belong to.

Ratio -> pixel conversion rounds outward (floor the mins, ceil the maxes),
so a pixel box always covers the ratio box it came from. The rounding is
done in exact rational arithmetic to keep that guarantee airtight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction


class GeometryError(ValueError):
    """A box violated an invariant it was required to satisfy."""


@dataclass(frozen=True)
class BoxRatio:
    """Box in normalized view coordinates, each value in [0, 1]."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise GeometryError(
                f"invalid ratio box [{self.x1}, {self.y1}, {self.x2}, {self.y2}]"
            )

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class BoxPx:
    """Box in integer pixel coordinates within a frame_w x frame_h frame.

    Coordinates are ordered and nonempty. Pipeline operations (ratio_to_px,
    local_to_global, adjust_roi, sanitize_raw) always return in-frame boxes;
    raw model proposals may sit partly outside the frame until adjusted, and
    ``in_frame`` reports which case a box is in.
    """

    x1: int
    y1: int
    x2: int
    y2: int
    frame_w: int
    frame_h: int

    def __post_init__(self):
        if self.frame_w < 1 or self.frame_h < 1:
            raise GeometryError(f"invalid frame {self.frame_w}x{self.frame_h}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(
                f"empty pixel box [{self.x1}, {self.y1}, {self.x2}, {self.y2}]"
            )

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def in_frame(self) -> bool:
        return 0 <= self.x1 and 0 <= self.y1 and self.x2 <= self.frame_w and self.y2 <= self.frame_h

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class IoUScore:
    """Intersection-over-union value, always in [0, 1]."""

    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise GeometryError(f"IoU out of range: {self.value}")


def _floor_scaled(ratio: float, scale: int) -> int:
    return math.floor(Fraction(ratio) * scale)


def _ceil_scaled(ratio: float, scale: int) -> int:
    return math.ceil(Fraction(ratio) * scale)


def ratio_to_px(b: BoxRatio, w: int, h: int) -> BoxPx:
    """Scale a ratio box to pixels, rounding outward so coverage is kept."""
    if w < 1 or h < 1:
        raise GeometryError(f"invalid target frame {w}x{h}")
    return BoxPx(
        _floor_scaled(b.x1, w),
        _floor_scaled(b.y1, h),
        _ceil_scaled(b.x2, w),
        _ceil_scaled(b.y2, h),
        w,
        h,
    )


def px_to_ratio(b: BoxPx) -> BoxRatio:
    """Inverse of ratio_to_px up to 1 px of outward rounding per edge."""
    return BoxRatio(
        b.x1 / b.frame_w,
        b.y1 / b.frame_h,
        b.x2 / b.frame_w,
        b.y2 / b.frame_h,
    )


def local_to_global(local: BoxRatio, parent: BoxPx) -> BoxPx:
    """Map a ratio box expressed on ``parent``'s view into the global frame.

    The full-view ratio box maps to ``parent`` exactly; rounding is outward
    so the result covers the exact affine image of ``local``.
    """
    return BoxPx(
        parent.x1 + _floor_scaled(local.x1, parent.width),
        parent.y1 + _floor_scaled(local.y1, parent.height),
        parent.x1 + _ceil_scaled(local.x2, parent.width),
        parent.y1 + _ceil_scaled(local.y2, parent.height),
        parent.frame_w,
        parent.frame_h,
    )


def _require_same_frame(a: BoxPx, b: BoxPx):
    if (a.frame_w, a.frame_h) != (b.frame_w, b.frame_h):
        raise GeometryError(
            f"frame mismatch: {a.frame_w}x{a.frame_h} vs {b.frame_w}x{b.frame_h}"
        )


def union_box(a: BoxPx, b: BoxPx) -> BoxPx:
    """Minimal box covering both inputs (same frame)."""
    _require_same_frame(a, b)
    return BoxPx(
        min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2),
        a.frame_w, a.frame_h,
    )


def intersect_box(a: BoxPx, b: BoxPx) -> BoxPx | None:
    """Intersection of two boxes, or None when the interiors are disjoint."""
    _require_same_frame(a, b)
    x1, y1 = max(a.x1, b.x1), max(a.y1, b.y1)
    x2, y2 = min(a.x2, b.x2), min(a.y2, b.y2)
    if x1 >= x2 or y1 >= y2:
        return None
    return BoxPx(x1, y1, x2, y2, a.frame_w, a.frame_h)


def clip_to_frame(b: BoxPx) -> BoxPx | None:
    """Clip a box to its own frame; None when nothing is left."""
    x1, y1 = max(b.x1, 0), max(b.y1, 0)
    x2, y2 = min(b.x2, b.frame_w), min(b.y2, b.frame_h)
    if x1 >= x2 or y1 >= y2:
        return None
    return BoxPx(x1, y1, x2, y2, b.frame_w, b.frame_h)


def sanitize_raw(
    coords,
    frame_w: int,
    frame_h: int,
    *,
    swap_inverted: bool = False,
    inflate_degenerate: bool = False,
) -> BoxPx | None:
    """Build an in-frame BoxPx from raw numbers, or None if unrecoverable.

    Optionally swaps inverted coordinate pairs and inflates a degenerate
    axis to 1 px (pushed inward at the frame edge) so downstream crops stay
    nonempty.
    """
    if len(coords) != 4:
        return None
    try:
        x1, y1, x2, y2 = (float(v) for v in coords)
    except (TypeError, ValueError):
        return None
    if swap_inverted:
        if x1 > x2:
            x1, x2 = x2, x1
        if y1 > y2:
            y1, y2 = y2, y1
    x1 = max(0, math.floor(x1))
    y1 = max(0, math.floor(y1))
    x2 = min(frame_w, math.ceil(x2))
    y2 = min(frame_h, math.ceil(y2))
    if x1 >= x2:
        if not inflate_degenerate or not (0 <= x1 <= frame_w and 0 <= x2 <= frame_w):
            return None
        x1 = min(max(x1, 0), frame_w - 1)
        x2 = x1 + 1
    if y1 >= y2:
        if not inflate_degenerate or not (0 <= y1 <= frame_h and 0 <= y2 <= frame_h):
            return None
        y1 = min(max(y1, 0), frame_h - 1)
        y2 = y1 + 1
    return BoxPx(int(x1), int(y1), int(x2), int(y2), frame_w, frame_h)


def adjust_roi(a: BoxPx, gt: BoxPx) -> BoxPx:
    """Expand a proposed RoI to cover the GT box, then clip to the frame.

    The result is the minimal bounding union of (a clipped to frame) and gt,
    so it covers gt, stays inside the frame, and is idempotent.
    """
    _require_same_frame(a, gt)
    if not gt.in_frame:
        raise GeometryError(f"GT box {gt.as_list()} lies outside its frame")
    clipped = clip_to_frame(a)
    if clipped is None:
        return gt
    return union_box(clipped, gt)


def area(b: BoxPx) -> int:
    """Area in pixels under half-open semantics."""
    return b.width * b.height


def _iou_values(ax1, ay1, ax2, ay2, bx1, by1, bx2, by2) -> float:
    ix1, iy1 = max(ax1, bx1), max(ay1, by1)
    ix2, iy2 = min(ax2, bx2), min(ay2, by2)
    iw, ih = max(0, ix2 - ix1), max(0, iy2 - iy1)
    inter = iw * ih
    if inter == 0:
        return 0.0
    a_area = (ax2 - ax1) * (ay2 - ay1)
    b_area = (bx2 - bx1) * (by2 - by1)
    return inter / (a_area + b_area - inter)


def iou(a: BoxPx | BoxRatio, b: BoxPx | BoxRatio) -> IoUScore:
    """Intersection-over-union of two boxes in the same coordinate space."""
    if isinstance(a, BoxPx) and isinstance(b, BoxPx):
        _require_same_frame(a, b)
    elif not (isinstance(a, BoxRatio) and isinstance(b, BoxRatio)):
        raise GeometryError(
            f"mismatched coordinate spaces: {type(a).__name__} vs {type(b).__name__}"
        )
    return IoUScore(_iou_values(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2))
