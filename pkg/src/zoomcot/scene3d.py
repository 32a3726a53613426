"""Pseudo-3D scene construction from depth rasters and instance masks.

Builds the per-image object list (category, box, depth, ordinal rank) and
keeps depth ordering consistent when the scene is restricted to a crop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import BoxPx, clip_to_frame, intersect_box

DEFAULT_MERGE_DEPTH_GAP = 0.15
DEFAULT_AREA_FLOOR_FRACTION = 0.005
SINGLETON_DEPTH = 0.5  # min-max renormalization is undefined for one value


class SceneError(ValueError):
    """Depth raster or mask data is inconsistent."""


@dataclass(frozen=True)
class DepthRaster:
    """Dense normalized depth field, row-major, values in [0, 1]."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.height, self.width):
            raise SceneError(
                f"raster shape {self.values.shape} != {self.height}x{self.width}"
            )
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise SceneError("depth values outside [0, 1]")
        self.values.setflags(write=False)


@dataclass(frozen=True)
class InstanceMask:
    """Run-length encoded foreground of one object over row-major pixel indices.

    ``rle`` alternates (start, length) pairs; runs must be sorted and
    non-overlapping.
    """

    object_id: int
    category: str
    rle: tuple[int, ...]
    provenance: str = ""

    def __post_init__(self):
        if len(self.rle) == 0 or len(self.rle) % 2 != 0:
            raise SceneError(f"mask {self.object_id}: empty or odd-length RLE")
        if any(l <= 0 for l in self.rle[1::2]) or any(s < 0 for s in self.rle[0::2]):
            raise SceneError(f"mask {self.object_id}: invalid run")

    @property
    def pixel_count(self) -> int:
        return int(sum(self.rle[1::2]))

    def max_index(self) -> int:
        starts, lengths = self.rle[0::2], self.rle[1::2]
        return max(s + l for s, l in zip(starts, lengths)) - 1

    def decode(self, width: int, height: int) -> np.ndarray:
        """Boolean (height, width) array of the mask's pixels."""
        if self.max_index() >= width * height:
            raise SceneError(f"mask {self.object_id} exceeds {width}x{height} raster")
        flat = np.zeros(width * height, dtype=bool)
        for s, l in zip(self.rle[0::2], self.rle[1::2]):
            flat[s : s + l] = True
        return flat.reshape(height, width)

    @classmethod
    def from_bool(cls, object_id: int, category: str, mask: np.ndarray, provenance: str = ""):
        """Encode a boolean array; raises on an empty mask."""
        flat = np.asarray(mask, dtype=bool).reshape(-1)
        idx = np.flatnonzero(flat)
        if idx.size == 0:
            raise SceneError(f"mask {object_id}: empty")
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate(([0], breaks + 1))
        ends = np.concatenate((breaks, [idx.size - 1]))
        rle = []
        for a, b in zip(starts, ends):
            rle.extend((int(idx[a]), int(idx[b] - idx[a] + 1)))
        return cls(object_id, category, tuple(rle), provenance)

    def bbox(self, width: int, height: int) -> BoxPx:
        """Tight pixel extent of the mask."""
        m = self.decode(width, height)
        ys, xs = np.nonzero(m)
        return BoxPx(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1, width, height)


@dataclass(frozen=True)
class SceneObject:
    """One pseudo-3D scene element: category, box, depth, ordinal rank (1 = nearest)."""

    object_id: int
    category: str
    box: BoxPx
    depth_raw: float
    depth_rank: int | None = None


def object_depth(mask: InstanceMask, depth: DepthRaster) -> float:
    """Median depth over the mask's pixels (robust to raster speckle)."""
    m = mask.decode(depth.width, depth.height)
    return float(np.median(depth.values[m]))


def _label_map(masks: list[InstanceMask], depth: DepthRaster) -> np.ndarray:
    labels = np.full((depth.height, depth.width), -1, dtype=np.int32)
    for i, mask in enumerate(masks):
        labels[mask.decode(depth.width, depth.height)] = i
    return labels


def _neighbor_pairs(labels: np.ndarray) -> set[tuple[int, int]]:
    """Pairs of distinct region indices that touch under 4-adjacency."""
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = (a != b) & (a >= 0) & (b >= 0)
        for u, v in zip(a[diff].tolist(), b[diff].tolist()):
            pairs.add((min(u, v), max(u, v)))
    return pairs


def merge_small_regions(
    masks: list[InstanceMask],
    depth: DepthRaster,
    area_floor: int,
    merge_depth_gap: float = DEFAULT_MERGE_DEPTH_GAP,
) -> list[InstanceMask]:
    """Absorb under-floor regions into depth-compatible adjacent regions.

    A region below ``area_floor`` merges into the touching region whose mean
    depth is closest, provided the gap is below ``merge_depth_gap``; regions
    with no admissible neighbor survive. Total foreground pixels are
    conserved. The absorbing region keeps its id and category.
    """
    if not masks:
        return []
    labels = _label_map(masks, depth)
    means = {
        i: float(depth.values[labels == i].mean()) for i in range(len(masks)) if (labels == i).any()
    }
    areas = {i: int((labels == i).sum()) for i in means}

    while True:
        pairs = _neighbor_pairs(labels)
        neighbors: dict[int, set[int]] = {i: set() for i in means}
        for u, v in pairs:
            neighbors[u].add(v)
            neighbors[v].add(u)
        candidates = []
        for i, a in areas.items():
            if a >= area_floor:
                continue
            admissible = [
                j for j in neighbors[i] if abs(means[i] - means[j]) < merge_depth_gap
            ]
            if admissible:
                j = min(admissible, key=lambda j: (abs(means[i] - means[j]), -areas[j]))
                candidates.append((a, i, j))
        if not candidates:
            break
        _, small, into = min(candidates)
        labels[labels == small] = into
        merged_pixels = depth.values[labels == into]
        means[into] = float(merged_pixels.mean())
        areas[into] = areas[into] + areas[small]
        del means[small], areas[small]

    survivors = []
    for i in sorted(areas):
        survivors.append(
            InstanceMask.from_bool(
                masks[i].object_id, masks[i].category, labels == i, masks[i].provenance
            )
        )
    return survivors


def build_scene(masks: list[InstanceMask], depth: DepthRaster) -> list[SceneObject]:
    """Objects with mask-extent boxes and median depths, in ordinal rank order."""
    objs = [
        SceneObject(
            object_id=m.object_id,
            category=m.category,
            box=m.bbox(depth.width, depth.height),
            depth_raw=object_depth(m, depth),
        )
        for m in masks
    ]
    return rank_objects(objs)


def rank_objects(objs: list[SceneObject]) -> list[SceneObject]:
    """Assign ordinal depth ranks 1..K, nearest first.

    Sorting is stable on (depth, larger-area-first); fully tied objects keep
    their input order.
    """
    from .geometry import area as box_area

    ordered = sorted(
        range(len(objs)), key=lambda i: (objs[i].depth_raw, -box_area(objs[i].box))
    )
    return [replace(objs[i], depth_rank=rank) for rank, i in enumerate(ordered, start=1)]


def _renormalize(depths: list[float]) -> list[float]:
    lo, hi = min(depths), max(depths)
    if hi - lo == 0:
        return [SINGLETON_DEPTH] * len(depths)
    return [(d - lo) / (hi - lo) for d in depths]


def localize_objects(objs: list[SceneObject], crop: BoxPx) -> list[SceneObject]:
    """Restrict a ranked scene to a crop, preserving relative depth order.

    Surviving boxes are clipped and translated into the crop's frame; depths
    are min-max renormalized over the subset (a lone object maps to 0.5);
    ranks are reassigned 1..k following the global rank order.
    """
    crop = clip_to_frame(crop)
    if crop is None:
        return []
    survivors = []
    for obj in objs:
        inter = intersect_box(obj.box, crop)
        if inter is None:
            continue
        local_box = BoxPx(
            inter.x1 - crop.x1,
            inter.y1 - crop.y1,
            inter.x2 - crop.x1,
            inter.y2 - crop.y1,
            crop.width,
            crop.height,
        )
        survivors.append(replace(obj, box=local_box))
    if not survivors:
        return []
    if all(o.depth_rank is not None for o in survivors):
        survivors.sort(key=lambda o: o.depth_rank)
    renormed = _renormalize([o.depth_raw for o in survivors])
    return [
        replace(obj, depth_raw=d, depth_rank=rank)
        for rank, (obj, d) in enumerate(zip(survivors, renormed), start=1)
    ]
