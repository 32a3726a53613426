"""Standalone command: images in, DPR1 rasters + mask JSON + manifest out."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .adapter import AdapterJob, run_job
from .backends import AdapterError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def collect_images(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthseg-adapter",
        description="Run depth estimation and instance segmentation over a "
        "directory of images and export DPR1 + mask JSON files.",
    )
    parser.add_argument("--images", required=True, help="input image directory")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--depth-model", default="builtin:luminance")
    parser.add_argument("--seg-model", default="builtin:color-regions")
    parser.add_argument("--refiner", default=None, help="optional mask refiner id")
    parser.add_argument(
        "--refine-min-area", type=int, default=256,
        help="only refine masks at least this many pixels",
    )
    parser.add_argument(
        "--min-region", type=int, default=24,
        help="builtin segmenter drops regions smaller than this",
    )
    parser.add_argument("--manifest", default=None, help="manifest output path")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        print(f"error: {images_dir} is not a directory", file=sys.stderr)
        return 1
    images = collect_images(images_dir)
    if not images:
        print(f"error: no images under {images_dir}", file=sys.stderr)
        return 1
    try:
        job = AdapterJob(
            images=images,
            out_dir=Path(args.out),
            depth_model=args.depth_model,
            seg_model=args.seg_model,
            refiner=args.refiner,
            refine_min_area=args.refine_min_area,
            min_region=args.min_region,
        )
        manifest = run_job(
            job, Path(args.manifest) if args.manifest else Path(args.out) / "manifest.json"
        )
    except AdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"exported {manifest['counts']['depth']} depth rasters and "
        f"{manifest['counts']['masks']} mask files to {args.out}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
