"""Image views: loading, cropping, and pixel-budget resizing.

A view is an immutable pixel buffer plus the global-frame box it came from,
so nested crops always know their provenance. Resizing to a pixel budget
preserves aspect ratio and never touches the provenance box.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import BoxPx, GeometryError, local_to_global, px_to_ratio


class DegenerateCrop(ValueError):
    """Requested crop has no pixels."""


@dataclass(frozen=True)
class PixelBudget:
    """Pixel-count window a view must fit into before being sent to a model."""

    min_pixels: int = 12_544
    max_pixels: int = 262_144

    def __post_init__(self):
        if not 0 < self.min_pixels <= self.max_pixels:
            raise ValueError(f"invalid budget {self.min_pixels}..{self.max_pixels}")


@dataclass(frozen=True)
class ImageView:
    """Immutable pixel buffer with global-frame provenance.

    ``origin_box`` identifies the region of the original image this view
    shows; its dimensions map affinely onto the buffer (they differ after a
    budget resize).
    """

    pixels: np.ndarray
    origin_box: BoxPx

    def __post_init__(self):
        if self.pixels.ndim not in (2, 3) or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError(f"bad pixel buffer shape {self.pixels.shape}")
        self.pixels.setflags(write=False)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def frame_w(self) -> int:
        return self.origin_box.frame_w

    @property
    def frame_h(self) -> int:
        return self.origin_box.frame_h


def full_view(pixels: np.ndarray) -> ImageView:
    """Wrap a decoded image as the root (whole-frame) view."""
    h, w = pixels.shape[0], pixels.shape[1]
    return ImageView(pixels, BoxPx(0, 0, w, h, w, h))


def load_image(path) -> ImageView:
    """Decode a raster image file into a root view (RGB, EXIF passed through)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return full_view(arr)


def encode_image(view: ImageView, format: str = "PNG") -> bytes:
    """Encode a view's pixels as a standard raster payload."""
    buf = io.BytesIO()
    Image.fromarray(view.pixels).save(buf, format=format)
    return buf.getvalue()


def crop(view: ImageView, b: BoxPx) -> ImageView:
    """Crop ``b`` (in the view's own pixel coordinates) out of the view.

    The result has exactly b's dimensions; its origin_box is composed
    through the parent's origin_box, so crop-of-crop provenance matches a
    direct crop to within the 1 px outward rounding.
    """
    if (b.frame_w, b.frame_h) != (view.width, view.height):
        raise GeometryError(
            f"crop box frame {b.frame_w}x{b.frame_h} does not match view "
            f"{view.width}x{view.height}"
        )
    if not b.in_frame:
        raise DegenerateCrop(f"crop box {b.as_list()} exceeds the view")
    pixels = view.pixels[b.y1 : b.y2, b.x1 : b.x2]
    if pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise DegenerateCrop(f"crop box {b.as_list()} is empty")
    if (view.width, view.height) == (view.origin_box.width, view.origin_box.height):
        # Unresized parent: provenance is a plain offset, exact.
        origin = BoxPx(
            view.origin_box.x1 + b.x1,
            view.origin_box.y1 + b.y1,
            view.origin_box.x1 + b.x2,
            view.origin_box.y1 + b.y2,
            view.frame_w,
            view.frame_h,
        )
    else:
        origin = local_to_global(px_to_ratio(b), view.origin_box)
    return ImageView(pixels, origin)


def resize_to_budget(view: ImageView, budget: PixelBudget) -> ImageView:
    """Rescale a view so its pixel count lands inside the budget.

    No-op for in-budget views. Upscales with ceil and downscales with floor
    so the bound is met exactly; aspect ratio is preserved to within 1 px.
    Bilinear resampling either way.
    """
    n = view.width * view.height
    if budget.min_pixels <= n <= budget.max_pixels:
        return view
    if n > budget.max_pixels:
        s = math.sqrt(budget.max_pixels / n)
        new_w = max(1, math.floor(view.width * s))
        new_h = max(1, math.floor(view.height * s))
    else:
        s = math.sqrt(budget.min_pixels / n)
        new_w = math.ceil(view.width * s)
        new_h = math.ceil(view.height * s)
    resized = Image.fromarray(view.pixels).resize((new_w, new_h), Image.BILINEAR)
    return ImageView(np.asarray(resized), view.origin_box)
