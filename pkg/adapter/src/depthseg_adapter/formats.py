"""Writers for the export formats.

DPR1 raster: magic "DPR1", little-endian u32 width, u32 height, then
width*height little-endian float32 values row-major in [0, 1].

Mask file: a JSON array of {object_id, category, rle, provenance?} where
rle alternates (start, length) runs over row-major pixel indices.
"""

from __future__ import annotations

import json
import struct

import numpy as np

DEPTH_MAGIC = b"DPR1"


def write_depth(path, values: np.ndarray):
    """values: (h, w) float array already normalized to [0, 1]."""
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(values.astype("<f4").tobytes(order="C"))


def encode_rle(mask: np.ndarray) -> list[int]:
    """Row-major (start, length) runs of a boolean mask."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    idx = np.flatnonzero(flat)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([0], breaks + 1))
    ends = np.concatenate((breaks, [idx.size - 1]))
    rle = []
    for a, b in zip(starts, ends):
        rle.extend((int(idx[a]), int(idx[b] - idx[a] + 1)))
    return rle


def write_masks(path, regions: list[dict]):
    """regions: [{object_id, category, mask (bool array), provenance?}]"""
    payload = []
    for region in regions:
        entry = {
            "object_id": region["object_id"],
            "category": region["category"],
            "rle": encode_rle(region["mask"]),
        }
        if region.get("provenance"):
            entry["provenance"] = region["provenance"]
        payload.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
