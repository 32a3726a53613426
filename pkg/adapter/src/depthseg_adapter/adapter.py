"""Batch jobs: run the backends over images and export depth + mask files."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import AdapterError, DepthBackend, Refiner, SegmentationBackend
from .formats import write_depth, write_masks

log = logging.getLogger("depthseg_adapter")

MANIFEST_SCHEMA = "visreason-manifest/1"


@dataclass
class AdapterJob:
    """One batch: images in, depth rasters and mask files out."""

    images: list[Path]
    out_dir: Path
    depth_model: str = "builtin:luminance"
    seg_model: str = "builtin:color-regions"
    refiner: str | None = None
    refine_min_area: int = 256
    min_region: int = 24
    depth_files: list[Path] = field(default_factory=list)
    mask_files: list[Path] = field(default_factory=list)

    def __post_init__(self):
        self.images = [Path(p) for p in self.images]
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if not self.out_dir.is_dir():
            raise AdapterError(f"output directory {self.out_dir} is unusable")


def _load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def normalize_depth(raw: np.ndarray) -> np.ndarray:
    """Per-image min-max normalization onto [0, 1]; flat fields map to 0.5."""
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-12:
        return np.full(raw.shape, 0.5, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def run_depth(job: AdapterJob) -> list[Path]:
    """One DPR1 file per image, dims equal to the image, values in [0, 1]."""
    backend = DepthBackend(job.depth_model)
    written = []
    for image_path in job.images:
        try:
            image = _load_rgb(image_path)
            raw = backend.raw_depth(image)
            if raw.shape != image.shape[:2]:
                # some estimators return a different working resolution
                raw = np.asarray(
                    Image.fromarray(raw).resize(
                        (image.shape[1], image.shape[0]), Image.BILINEAR
                    ),
                    dtype=np.float32,
                )
            out = job.out_dir / f"{image_path.stem}.dpr"
            write_depth(out, normalize_depth(raw))
            written.append(out)
        except (OSError, ValueError) as exc:
            log.warning("depth inference failed for %s: %s", image_path, exc)
    job.depth_files = written
    return written


def run_segmentation(job: AdapterJob) -> list[Path]:
    """One mask JSON per image; refined masks carry a provenance tag."""
    backend = SegmentationBackend(job.seg_model, min_region=job.min_region)
    refiner = Refiner(job.refiner, job.refine_min_area) if job.refiner else None
    written = []
    for image_path in job.images:
        try:
            image = _load_rgb(image_path)
            regions = backend.segment(image)
            if refiner is not None:
                regions = refiner.refine(regions)
            regions = [r for r in regions if r["mask"].any()]
            out = job.out_dir / f"{image_path.stem}.json"
            write_masks(out, regions)
            written.append(out)
        except (OSError, ValueError) as exc:
            log.warning("segmentation failed for %s: %s", image_path, exc)
    job.mask_files = written
    return written


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def export_manifest(job: AdapterJob) -> dict:
    """Manifest fragment (file list + hashes) for the exported artifacts."""
    files = {}
    for role, paths in (("depth", job.depth_files), ("masks", job.mask_files)):
        files[role] = [
            {"path": str(p), "sha256": _sha256(p), "bytes": p.stat().st_size}
            for p in paths
        ]
    return {
        "schema": MANIFEST_SCHEMA,
        "counts": {
            "images": len(job.images),
            "depth": len(job.depth_files),
            "masks": len(job.mask_files),
        },
        "files": files,
    }


def run_job(job: AdapterJob, manifest_path: Path | None = None) -> dict:
    run_depth(job)
    run_segmentation(job)
    manifest = export_manifest(job)
    if manifest_path is not None:
        Path(manifest_path).write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return manifest
