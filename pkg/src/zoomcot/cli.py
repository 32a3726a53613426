"""Command-line surface for the full pipeline.

Subcommands cover ingestion, pseudo-3D annotation, trace generation (2D and
depth-aware), distillation, grounding augmentation, the zoom-tool benchmark,
RoI/grounding evaluation, judge-score parsing, and corpus statistics. Exit
codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from PIL import Image

from . import imaging, metrics, protocol, scene3d, store, trace_gen
from .generator_client import ScriptedOracle, TripletResponse
from .geometry import BoxRatio
from .grounding_parser import parse_groundings


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _report_diagnostics(diagnostics: list[str]):
    for d in diagnostics:
        print(f"warning: {d}", file=sys.stderr)


# ------------------------------------------------------------------ ingest


def cmd_ingest(args) -> int:
    raw_path = Path(args.input)
    if not raw_path.exists():
        return _fail(f"input {raw_path} does not exist")
    images_root = Path(args.images_root)
    samples, diagnostics = [], []
    with open(raw_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                image_rel = rec["image"]
                image_path = images_root / image_rel
                if "width" in rec and "height" in rec:
                    w, h = int(rec["width"]), int(rec["height"])
                else:
                    with Image.open(image_path) as im:
                        w, h = im.size
                convention = rec.get("bbox_format", "xyxy")
                box, flags = store.normalize_gt_box(rec["bbox"], convention, w, h)
                if box is None:
                    diagnostics.append(f"line {lineno}: unusable bbox {rec['bbox']}")
                    continue
                if not image_path.exists():
                    diagnostics.append(f"line {lineno}: image {image_path} missing")
                    continue
                samples.append(
                    store.SampleRecord(
                        id=str(rec.get("id", f"s{lineno:05d}")),
                        image_path=str(image_rel),
                        question=rec["question"],
                        short_answer=rec["short_answer"],
                        long_answer=rec.get("long_answer"),
                        gt_box=box,
                        box_convention_src=convention,
                        source=rec.get("source", ""),
                        flags=flags,
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                diagnostics.append(f"line {lineno}: {exc}")
    store.save_samples(args.out, samples)
    _report_diagnostics(diagnostics)
    _print_json(
        {"ingested": len(samples), "skipped": len(diagnostics), "out": str(args.out)}
    )
    return 0


# -------------------------------------------------------------- annotate3d


def cmd_annotate3d(args) -> int:
    samples, diags = store.load_samples(args.samples)
    _report_diagnostics(diags)
    if not samples:
        return _fail("no samples to annotate")
    depth_dir, masks_dir = Path(args.depth_dir), Path(args.masks_dir)
    scenes, skipped = {}, []
    for sample in samples:
        stem = Path(sample.image_path).stem
        depth_path = depth_dir / f"{stem}.dpr"
        masks_path = masks_dir / f"{stem}.json"
        if not depth_path.exists() or not masks_path.exists():
            skipped.append(sample.id)
            continue
        try:
            raster, clamped = store.load_depth_raster(depth_path)
            masks, mask_diags = store.load_masks(masks_path, raster.width, raster.height)
            _report_diagnostics(mask_diags)
            if clamped:
                print(
                    f"warning: {depth_path}: clamped {clamped} out-of-range values",
                    file=sys.stderr,
                )
            floor = max(1, int(args.area_floor_frac * raster.width * raster.height))
            merged = scene3d.merge_small_regions(masks, raster, floor, args.tau_merge)
            scenes[sample.id] = scene3d.build_scene(merged, raster)
        except (store.StoreError, scene3d.SceneError) as exc:
            skipped.append(sample.id)
            print(f"warning: {sample.id}: {exc}", file=sys.stderr)
    store.save_scenes(args.out, scenes)
    _print_json({"annotated": len(scenes), "skipped": skipped, "out": str(args.out)})
    return 0


# ----------------------------------------------------------- trace gen


def _load_oracle(path) -> ScriptedOracle:
    script = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "raw" in rec:
                script.append(rec["raw"])
            else:
                script.append(
                    TripletResponse(
                        rec["description"], BoxRatio(*rec["aoi"]), rec["reasoning"]
                    )
                )
    return ScriptedOracle(script)


def _make_generator(args):
    if getattr(args, "oracle", None):
        return _load_oracle(args.oracle)
    if getattr(args, "config", None):
        from .generator_client import EndpointClient, EndpointConfig

        cfg = store.load_config(args.config)
        if not cfg.endpoint_base_url:
            raise store.StoreError("config has no endpoint_base_url")
        return EndpointClient(
            EndpointConfig(
                base_url=cfg.endpoint_base_url,
                model=cfg.endpoint_model,
                credential_env=cfg.credential_env,
                timeout_s=cfg.endpoint_timeout_s,
                retries=cfg.endpoint_retries,
            )
        )
    raise store.StoreError("either --oracle or --config is required")


def _gen_traces(args, depth_aware: bool) -> int:
    samples, diags = store.load_samples(args.samples)
    _report_diagnostics(diags)
    if not samples:
        return _fail("no samples loaded")
    scenes = {}
    if depth_aware:
        scenes, scene_diags = store.load_scenes(args.scene)
        _report_diagnostics(scene_diags)
    try:
        gen = _make_generator(args)
    except store.StoreError as exc:
        return _fail(str(exc))
    policy = trace_gen.GenPolicy(
        r_max=args.r_max or (4 if depth_aware else 3),
        area_ratio_n=args.area_ratio_n,
        tau_large=args.tau_large,
    )
    images_root = Path(args.images_root)

    def one(sample):
        image = imaging.load_image(images_root / sample.image_path)
        if depth_aware:
            scene = scenes.get(sample.id, [])
            return trace_gen.generate_trace_3d(sample, image, scene, policy, gen)
        return trace_gen.generate_trace_2d(sample, image, policy, gen)

    traces, failures = [], []
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        for sample, result in zip(samples, pool.map(lambda s: _safe(one, s), samples)):
            if isinstance(result, Exception):
                failures.append(f"{sample.id}: {result}")
            else:
                traces.append(result)
    if args.consistency_fix:
        fixed = []
        for t in traces:
            try:
                fixed.append(trace_gen.consistency_fix(t))
            except trace_gen.ConsistencyError as exc:
                failures.append(f"{t.id}: {exc}")
        traces = fixed
    store.save_traces(args.out, traces)
    _report_diagnostics(failures)
    _print_json({"traces": len(traces), "failed": len(failures), "out": str(args.out)})
    return 0 if traces else 1


def _safe(fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # isolate per-sample failures
        return exc


def cmd_gen_trace(args) -> int:
    return _gen_traces(args, depth_aware=False)


def cmd_gen_trace_3d(args) -> int:
    return _gen_traces(args, depth_aware=True)


def cmd_distill(args) -> int:
    traces, diags = store.load_traces(args.traces)
    _report_diagnostics(diags)
    if not traces:
        return _fail("no traces loaded")
    try:
        gen = _make_generator(args)
    except store.StoreError as exc:
        return _fail(str(exc))
    failures = []
    out = []
    for t in traces:
        try:
            distilled = trace_gen.distill_single_round(t, gen)
            out.append(trace_gen.replace_trace(t, distilled=distilled))
        except trace_gen.DistillError as exc:
            failures.append(f"{t.id}: {exc}")
            out.append(t)
    store.save_traces(args.out, out)
    _report_diagnostics(failures)
    _print_json({"distilled": len(out) - len(failures), "failed": len(failures)})
    return 0


def cmd_augment_ground(args) -> int:
    traces, diags = store.load_traces(args.traces)
    _report_diagnostics(diags)
    scenes, scene_diags = store.load_scenes(args.scene)
    _report_diagnostics(scene_diags)
    augmented = 0
    out = []
    for t in traces:
        scene = t.scene if t.scene is not None else scenes.get(t.id)
        if not scene:
            out.append(t)
            continue
        entries = trace_gen.scene_grounding_entries(
            scene, t.gt_box.frame_w, t.gt_box.frame_h
        )
        rounds = [
            trace_gen.CoTRound(
                r.description,
                r.roi,
                trace_gen.augment_grounding(r.rationale, entries),
                r.round_index,
            )
            for r in t.rounds
        ]
        out.append(trace_gen.replace_trace(t, rounds=rounds))
        augmented += 1
    store.save_traces(args.out, out)
    _print_json({"augmented": augmented, "total": len(out), "out": str(args.out)})
    return 0


# ------------------------------------------------------------- evaluation


def cmd_eval_bench(args) -> int:
    samples, diags = store.load_samples(args.samples)
    _report_diagnostics(diags)
    if not samples:
        return _fail("no samples loaded")
    turn_scripts = {}
    with open(args.turns, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                turn_scripts[str(rec["id"])] = rec["turns"]
    images_root = Path(args.images_root)
    episodes = []
    per_dataset: dict[str, list[float]] = {}
    for sample in samples:
        turns = turn_scripts.get(sample.id)
        if turns is None:
            continue
        image = imaging.load_image(images_root / sample.image_path)
        episode = protocol.run_episode(
            sample.id,
            image,
            sample.question,
            protocol.ScriptedTurnModel(turns),
            r_max=args.r_max,
        )
        episodes.append(episode)
        try:
            answer = metrics.normalize_answer(protocol.extract_answer(episode))
        except protocol.ExtractionError:
            answer = ""
        expected = metrics.normalize_answer(sample.short_answer)
        per_dataset.setdefault(sample.source or "default", []).append(
            1.0 if answer == expected else 0.0
        )
    store.save_episodes(args.transcripts, episodes)
    report = {
        "per_dataset": {k: sum(v) / len(v) for k, v in per_dataset.items()},
        "macro_average": metrics.macro_average(per_dataset) if per_dataset else None,
        "episodes": len(episodes),
        "transcripts": str(args.transcripts),
    }
    _print_json(report)
    return 0


def _gt_boxes_by_id(path):
    samples, diags = store.load_samples(path)
    _report_diagnostics(diags)
    return {s.id: s.gt_box for s in samples}


def cmd_eval_roi(args) -> int:
    pairs = []
    if args.transcripts:
        if not args.gt:
            return _fail("--gt is required with --transcripts")
        episodes, diags = store.load_episodes(args.transcripts)
        _report_diagnostics(diags)
        gt = _gt_boxes_by_id(args.gt)
        for e in episodes:
            if e.sample_id not in gt:
                continue
            try:
                pred = protocol.final_roi(e)
            except protocol.MissingRoI:
                pred = None
            pairs.append((pred, gt[e.sample_id]))
    elif args.traces:
        traces, diags = store.load_traces(args.traces)
        _report_diagnostics(diags)
        pairs = [(t.rounds[-1].roi, t.gt_box) for t in traces]
    else:
        return _fail("provide --transcripts or --traces")
    if not pairs:
        return _fail("nothing to evaluate")
    report = metrics.roi_accuracy(pairs, tuple(args.thresholds))
    _print_json(
        {
            "n": report.n,
            "accuracy": {f"IoU@{t:g}": v for t, v in report.accuracy.items()},
            "mean_iou": sum(report.per_sample_iou) / report.n,
        }
    )
    if args.table:
        print(metrics.render_roi_table({"model": report}))
    return 0


def cmd_eval_ground(args) -> int:
    episodes, diags = store.load_episodes(args.transcripts)
    _report_diagnostics(diags)
    references, ref_diags = store.load_traces(args.gt_traces)
    _report_diagnostics(ref_diags)
    refs = {t.id: t for t in references}
    samples = []
    for e in episodes:
        ref = refs.get(e.sample_id)
        if ref is None or not e.turns:
            continue
        frame = (e.image_w, e.image_h)
        pred = parse_groundings(e.turns[0].turn.think, frame).entries
        first = ref.rounds[0]
        gt = parse_groundings(
            first.description + "\n" + first.rationale, frame
        ).entries
        samples.append((pred, gt))
    if not samples:
        return _fail("no overlapping samples between transcripts and references")
    report = metrics.grounding_metrics(samples)
    _print_json(asdict(report))
    if args.table:
        print(metrics.render_grounding_table({"model": report}))
    return 0


def cmd_judge(args) -> int:
    scores, failures = [], []
    with open(args.raw, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                score = metrics.parse_judge_score(rec["judge_output"])
            except metrics.JudgeParseError as exc:
                failures.append(f"line {lineno}: {exc}")
                continue
            scores.append(
                {
                    "id": rec.get("id", f"line{lineno}"),
                    "score": score.value,
                    "lenient": score.lenient,
                    "clamped": score.clamped,
                }
            )
    if args.out:
        store._write_jsonl(args.out, (store.canonical_json(s) for s in scores))
    _report_diagnostics(failures)
    mean = sum(s["score"] for s in scores) / len(scores) if scores else None
    _print_json({"scored": len(scores), "failed": len(failures), "mean": mean})
    return 0 if scores or not failures else 1


def cmd_parse_ground(args) -> int:
    if args.text is not None:
        text = args.text
    elif args.input:
        text = Path(args.input).read_text(encoding="utf-8")
    else:
        text = sys.stdin.read()
    frame = tuple(args.frame) if args.frame else None
    scan = parse_groundings(text, frame)
    _report_diagnostics(scan.diagnostics)
    _print_json(
        {
            name: {
                "bbox_ratio": e.bbox_ratio.as_list(),
                "depth01": e.depth01,
            }
            for name, e in scan.entries.items()
        }
    )
    return 0


def cmd_stats(args) -> int:
    traces, diags = store.load_traces(args.traces)
    _report_diagnostics(diags)
    if not traces:
        return _fail("no traces loaded")
    report = metrics.dataset_stats(traces, length_unit=args.length_unit)
    _print_json(
        {
            "sample_count": report.sample_count,
            "round_histogram": {str(k): v for k, v in sorted(report.round_histogram.items())},
            "mean_gt_area_fraction": report.mean_gt_area_fraction,
            "mean_roi_area_fraction": report.mean_roi_area_fraction,
            "mean_response_length": {
                str(k): v for k, v in report.mean_response_length.items()
            },
            "length_unit": report.length_unit,
        }
    )
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zoomcot",
        description="Spatially grounded visual chain-of-thought toolkit: "
        "trace generation, zoom-tool evaluation, grounding metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize raw samples into the canonical schema")
    p.add_argument("--input", required=True, help="raw samples JSONL")
    p.add_argument("--images-root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("annotate3d", help="build pseudo-3D scenes from depth + masks")
    p.add_argument("--samples", required=True)
    p.add_argument("--depth-dir", required=True)
    p.add_argument("--masks-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--area-floor-frac", type=float, default=scene3d.DEFAULT_AREA_FLOOR_FRACTION)
    p.add_argument("--tau-merge", type=float, default=scene3d.DEFAULT_MERGE_DEPTH_GAP)
    p.set_defaults(func=cmd_annotate3d)

    for name, func, depth_aware in (
        ("gen-trace", cmd_gen_trace, False),
        ("gen-trace-3d", cmd_gen_trace_3d, True),
    ):
        p = sub.add_parser(name, help=f"generate {'depth-aware ' if depth_aware else ''}multi-round traces")
        p.add_argument("--samples", required=True)
        p.add_argument("--images-root", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--oracle", help="scripted triplet JSONL (offline generator)")
        p.add_argument("--config", help="endpoint config file")
        p.add_argument("--r-max", type=int, default=0, help="round budget (default 3 / 4)")
        p.add_argument("--area-ratio-n", type=float, default=2.0)
        p.add_argument("--tau-large", type=float, default=0.30)
        p.add_argument("--workers", type=int, default=4)
        p.add_argument(
            "--consistency-fix", action="store_true",
            help="run the cross-round repair pass (clip, shrinkage, GT cover)",
        )
        if depth_aware:
            p.add_argument("--scene", required=True, help="scene annotations JSONL")
        p.set_defaults(func=func)

    p = sub.add_parser("distill", help="add single-round distilled steps to traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle")
    p.add_argument("--config")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("augment-ground", help="insert box/depth annotations after object mentions")
    p.add_argument("--traces", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment_ground)

    p = sub.add_parser("eval-bench", help="run the multi-round zoom benchmark")
    p.add_argument("--samples", required=True)
    p.add_argument("--images-root", required=True)
    p.add_argument("--turns", required=True, help="scripted model turns JSONL")
    p.add_argument("--transcripts", required=True, help="output episodes JSONL")
    p.add_argument("--r-max", type=int, default=protocol.R_MAX_DEFAULT)
    p.set_defaults(func=cmd_eval_bench)

    p = sub.add_parser("eval-roi", help="RoI localization accuracy")
    p.add_argument("--transcripts")
    p.add_argument("--gt", help="samples JSONL with GT boxes")
    p.add_argument("--traces", help="score trace final rounds against their own GT")
    p.add_argument("--thresholds", type=float, nargs="+", default=list(metrics.ROI_THRESHOLDS))
    p.add_argument("--table", action="store_true")
    p.set_defaults(func=cmd_eval_roi)

    p = sub.add_parser("eval-ground", help="grounded-ratio / box IoU / depth error")
    p.add_argument("--transcripts", required=True)
    p.add_argument("--gt-traces", required=True, help="reference traces JSONL")
    p.add_argument("--table", action="store_true")
    p.set_defaults(func=cmd_eval_ground)

    p = sub.add_parser("judge", help="parse grader outputs into scores")
    p.add_argument("--raw", required=True, help="JSONL with judge_output fields")
    p.add_argument("--out")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("parse-ground", help="filter mode: reasoning text in, grounding entries out")
    p.add_argument("--text", help="parse this string instead of a file/stdin")
    p.add_argument("--input", help="text file to parse (default: stdin)")
    p.add_argument("--frame", type=int, nargs=2, metavar=("W", "H"),
                   help="frame dims for pixel-unit boxes")
    p.set_defaults(func=cmd_parse_ground)

    p = sub.add_parser("stats", help="corpus statistics over traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--length-unit", choices=("chars", "tokens"), default="chars")
    p.set_defaults(func=cmd_stats)

    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OSError, store.StoreError, json.JSONDecodeError) as exc:
        return _fail(str(exc))


def main():
    sys.exit(cli_dispatch())
