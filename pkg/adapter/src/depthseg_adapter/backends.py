"""Model backends resolved by identifier at runtime.

``builtin:`` identifiers are dependency-free stand-ins used in CI and
offline smoke runs; any other identifier is fetched through the optional
torch/transformers stack. Weights are never vendored.
"""

from __future__ import annotations

import numpy as np


class AdapterError(Exception):
    """Backend could not be resolved or a model failed to load."""


# palette for the stand-in segmenter's category names
_PALETTE = {
    "red": (200, 50, 50),
    "green": (50, 200, 50),
    "blue": (60, 60, 200),
    "yellow": (210, 210, 60),
    "bright": (230, 230, 230),
    "dark": (30, 30, 30),
}


def _luminance(image: np.ndarray) -> np.ndarray:
    rgb = image.astype(np.float32)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def _builtin_depth(image: np.ndarray) -> np.ndarray:
    """Luminance used as a depth proxy; darker = farther. Raw, unnormalized."""
    return 255.0 - _luminance(image)


def _quantize(image: np.ndarray, step: int = 64) -> np.ndarray:
    return (image.astype(np.int32) // step).astype(np.int32)


def _label_components(cells: np.ndarray) -> np.ndarray:
    """4-connected components over equal-valued cells (two-pass union-find)."""
    h, w = cells.shape[:2]
    labels = np.zeros((h, w), dtype=np.int32)
    parent = [0]

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    next_label = 1
    same_left = np.zeros((h, w), dtype=bool)
    same_up = np.zeros((h, w), dtype=bool)
    same_left[:, 1:] = (cells[:, 1:] == cells[:, :-1]).all(axis=-1)
    same_up[1:, :] = (cells[1:, :] == cells[:-1, :]).all(axis=-1)
    for y in range(h):
        for x in range(w):
            left = labels[y, x - 1] if x > 0 and same_left[y, x] else 0
            up = labels[y - 1, x] if y > 0 and same_up[y, x] else 0
            if left and up:
                labels[y, x] = min(left, up)
                union(left, up)
            elif left or up:
                labels[y, x] = left or up
            else:
                labels[y, x] = next_label
                parent.append(next_label)
                next_label += 1
    roots = np.array([find(i) for i in range(next_label)], dtype=np.int32)
    return roots[labels]


def _nearest_palette_name(color: np.ndarray) -> str:
    best, best_d = "region", None
    for name, ref in _PALETTE.items():
        d = float(np.sum((color - np.asarray(ref, dtype=np.float32)) ** 2))
        if best_d is None or d < best_d:
            best, best_d = name, d
    return best


def _builtin_segmentation(image: np.ndarray, min_region: int) -> list[dict]:
    """Color-quantized connected components with palette category names."""
    labels = _label_components(_quantize(image))
    regions = []
    object_id = 1
    for value in np.unique(labels):
        mask = labels == value
        if int(mask.sum()) < min_region:
            continue
        mean_color = image[mask].reshape(-1, image.shape[-1]).mean(axis=0)
        regions.append(
            {
                "object_id": object_id,
                "category": _nearest_palette_name(mean_color.astype(np.float32)),
                "mask": mask,
            }
        )
        object_id += 1
    return regions


def _refine_fill(mask: np.ndarray) -> np.ndarray:
    """3x3 morphological closing: bridges single-pixel gaps and holes."""
    padded = np.pad(mask, 1)
    dilated = np.zeros_like(padded)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            dilated |= np.roll(np.roll(padded, dy, axis=0), dx, axis=1)
    eroded = np.ones_like(padded)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            eroded &= np.roll(np.roll(dilated, dy, axis=0), dx, axis=1)
    return eroded[1:-1, 1:-1]


class DepthBackend:
    def __init__(self, identifier: str):
        self.identifier = identifier
        if identifier.startswith("builtin:"):
            if identifier != "builtin:luminance":
                raise AdapterError(f"unknown builtin depth model {identifier!r}")
            self._pipeline = None
        else:
            try:
                from transformers import pipeline

                self._pipeline = pipeline("depth-estimation", model=identifier)
            except Exception as exc:  # import, download, or load failure
                raise AdapterError(f"cannot load depth model {identifier!r}: {exc}")

    def raw_depth(self, image: np.ndarray) -> np.ndarray:
        if self._pipeline is None:
            return _builtin_depth(image)
        from PIL import Image

        result = self._pipeline(Image.fromarray(image))
        return np.asarray(result["depth"], dtype=np.float32)


class SegmentationBackend:
    def __init__(self, identifier: str, min_region: int = 24):
        self.identifier = identifier
        self.min_region = min_region
        if identifier.startswith("builtin:"):
            if identifier != "builtin:color-regions":
                raise AdapterError(f"unknown builtin segmentation model {identifier!r}")
            self._pipeline = None
        else:
            try:
                from transformers import pipeline

                self._pipeline = pipeline("image-segmentation", model=identifier)
            except Exception as exc:
                raise AdapterError(f"cannot load segmentation model {identifier!r}: {exc}")

    def segment(self, image: np.ndarray) -> list[dict]:
        if self._pipeline is None:
            return _builtin_segmentation(image, self.min_region)
        from PIL import Image

        regions = []
        for i, seg in enumerate(self._pipeline(Image.fromarray(image)), start=1):
            mask = np.asarray(seg["mask"], dtype=bool)
            if mask.any():
                regions.append(
                    {"object_id": i, "category": seg.get("label", "object"), "mask": mask}
                )
        return regions


class Refiner:
    """Optional mask refinement for sufficiently large objects.

    The size cutoff is a flag, not a fixed constant; the value used is
    recorded in each refined mask's provenance.
    """

    def __init__(self, identifier: str, min_area: int):
        self.identifier = identifier
        self.min_area = min_area
        if identifier != "builtin:fill":
            raise AdapterError(f"unknown refiner {identifier!r}")

    def refine(self, regions: list[dict]) -> list[dict]:
        out = []
        for region in regions:
            mask = region["mask"]
            if int(mask.sum()) >= self.min_area:
                region = dict(region)
                region["mask"] = _refine_fill(mask)
                region["provenance"] = f"{self.identifier}(min_area={self.min_area})"
            out.append(region)
        return out
