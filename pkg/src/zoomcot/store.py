"""Persistence for every record type, plus manifests and configuration.

Everything streams as JSON Lines with a per-line ``schema`` tag
(name/major); loaders reject higher majors and isolate bad lines as
diagnostics instead of failing the file. Boxes serialize as plain
[x1, y1, x2, y2] arrays; the enclosing record declares the coordinate
space.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoxPx, GeometryError, sanitize_raw
from .protocol import (
    Answer,
    Episode,
    ToolCall,
    Turn,
    TurnRecord,
    Violation,
)
from .scene3d import DepthRaster, InstanceMask, SceneObject
from .trace_gen import CoTRound, GenPolicy, TraceRecord
from .imaging import PixelBudget

SAMPLE_SCHEMA = "visreason-sample/1"
TRACE_SCHEMA = "visreason-trace/1"
EPISODE_SCHEMA = "visreason-episode/1"
SCENE_SCHEMA = "visreason-scene/1"
MANIFEST_SCHEMA = "visreason-manifest/1"

DEPTH_MAGIC = b"DPR1"


class StoreError(Exception):
    """File-level persistence failure (bad magic, schema, truncation)."""


def canonical_json(obj) -> str:
    """Deterministic single-line encoding used for every persisted record."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _check_schema(record: dict, expected: str):
    tag = record.get("schema", "")
    name, _, major = tag.partition("/")
    exp_name, _, exp_major = expected.partition("/")
    if name != exp_name:
        raise StoreError(f"schema {tag!r} is not {exp_name!r}")
    if not major.isdigit() or int(major) > int(exp_major):
        raise StoreError(f"unsupported schema major in {tag!r} (have {expected!r})")


def _iter_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, line


def _write_jsonl(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


# ---------------------------------------------------------------- samples


@dataclass
class SampleRecord:
    """One benchmark sample with a normalized xyxy pixel GT box."""

    id: str
    image_path: str
    question: str
    short_answer: str
    gt_box: BoxPx
    long_answer: str | None = None
    box_convention_src: str = "xyxy"
    source: str = ""
    flags: list[str] = field(default_factory=list)


def normalize_gt_box(raw, convention: str, frame_w: int, frame_h: int):
    """xywh or xyxy raw values -> in-frame BoxPx; returns (box, repair flags)."""
    if len(raw) != 4:
        return None, ["bad_box_length"]
    x1, y1, a, b = (float(v) for v in raw)
    if convention == "xywh":
        x2, y2 = x1 + a, y1 + b
    else:
        x2, y2 = a, b
    flags = []
    if x1 > x2 or y1 > y2:
        flags.append("box_inverted_repaired")
    box = sanitize_raw(
        (x1, y1, x2, y2), frame_w, frame_h, swap_inverted=True, inflate_degenerate=True
    )
    if box is None:
        return None, flags + ["box_unusable"]
    if (box.x1, box.y1, box.x2, box.y2) != (x1, y1, x2, y2):
        if not flags:
            flags.append("box_adjusted")
    return box, flags


def sample_to_json(s: SampleRecord) -> dict:
    return {
        "schema": SAMPLE_SCHEMA,
        "id": s.id,
        "image": s.image_path,
        "image_size": [s.gt_box.frame_w, s.gt_box.frame_h],
        "question": s.question,
        "short_answer": s.short_answer,
        "long_answer": s.long_answer,
        "box_space": "pixel",
        "gt_box": s.gt_box.as_list(),
        "box_convention_src": s.box_convention_src,
        "source": s.source,
        "flags": s.flags,
    }


def sample_from_json(record: dict) -> SampleRecord:
    _check_schema(record, SAMPLE_SCHEMA)
    w, h = record["image_size"]
    box = BoxPx(*(int(v) for v in record["gt_box"]), int(w), int(h))
    if not box.in_frame:
        raise ValueError(f"gt_box {box.as_list()} outside {w}x{h} frame")
    return SampleRecord(
        id=str(record["id"]),
        image_path=record["image"],
        question=record["question"],
        short_answer=record["short_answer"],
        long_answer=record.get("long_answer"),
        gt_box=box,
        box_convention_src=record.get("box_convention_src", "xyxy"),
        source=record.get("source", ""),
        flags=list(record.get("flags", [])),
    )


def save_samples(path, samples: list[SampleRecord]):
    _write_jsonl(path, (canonical_json(sample_to_json(s)) for s in samples))


def load_samples(path) -> tuple[list[SampleRecord], list[str]]:
    """Load samples; malformed lines are skipped and reported, not fatal."""
    samples, diagnostics = [], []
    for lineno, line in _iter_jsonl(path):
        try:
            samples.append(sample_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, StoreError) as exc:
            diagnostics.append(f"{path}:{lineno}: {exc}")
    return samples, diagnostics


# ------------------------------------------------------------------ scenes


def scene_to_json(sample_id: str, objects: list[SceneObject]) -> dict:
    return {
        "schema": SCENE_SCHEMA,
        "id": sample_id,
        "box_space": "pixel",
        "frame": [objects[0].box.frame_w, objects[0].box.frame_h] if objects else [0, 0],
        "objects": [
            {
                "object_id": o.object_id,
                "category": o.category,
                "box": o.box.as_list(),
                "depth_raw": o.depth_raw,
                "depth_rank": o.depth_rank,
            }
            for o in objects
        ],
    }


def scene_from_json(record: dict) -> tuple[str, list[SceneObject]]:
    _check_schema(record, SCENE_SCHEMA)
    w, h = record["frame"]
    objects = [
        SceneObject(
            object_id=int(o["object_id"]),
            category=o["category"],
            box=BoxPx(*(int(v) for v in o["box"]), int(w), int(h)),
            depth_raw=float(o["depth_raw"]),
            depth_rank=o.get("depth_rank"),
        )
        for o in record["objects"]
    ]
    return str(record["id"]), objects


def save_scenes(path, scenes: dict[str, list[SceneObject]]):
    _write_jsonl(
        path, (canonical_json(scene_to_json(k, v)) for k, v in scenes.items())
    )


def load_scenes(path) -> tuple[dict[str, list[SceneObject]], list[str]]:
    scenes, diagnostics = {}, []
    for lineno, line in _iter_jsonl(path):
        try:
            sample_id, objects = scene_from_json(json.loads(line))
            scenes[sample_id] = objects
        except (json.JSONDecodeError, KeyError, ValueError, StoreError) as exc:
            diagnostics.append(f"{path}:{lineno}: {exc}")
    return scenes, diagnostics


# ------------------------------------------------------------------ traces

_TRACE_FIELDS = {
    "schema", "id", "image", "image_size", "question", "short_answer",
    "long_answer", "box_space", "gt_box", "rounds", "final_justification",
    "distilled", "scene", "flags", "repairs",
}


def _round_to_json(r: CoTRound) -> dict:
    return {
        "description": r.description,
        "roi": r.roi.as_list(),
        "rationale": r.rationale,
        "round_index": r.round_index,
    }


def _round_from_json(obj: dict, w: int, h: int) -> CoTRound:
    coords = obj["roi"]
    try:
        # out-of-frame boxes are preserved so consistency_fix can repair
        # them with a logged entry
        roi = BoxPx(*(int(v) for v in coords), w, h)
    except (TypeError, ValueError, GeometryError):
        roi = sanitize_raw(coords, w, h, swap_inverted=True, inflate_degenerate=True)
        if roi is None:
            raise ValueError(f"round RoI {coords} unusable in {w}x{h}")
    return CoTRound(
        description=obj.get("description", ""),
        roi=roi,
        rationale=obj.get("rationale", ""),
        round_index=int(obj.get("round_index", 0)),
    )


def trace_to_json(t: TraceRecord) -> dict:
    record = {
        "schema": TRACE_SCHEMA,
        "id": t.id,
        "image": t.image,
        "image_size": [t.gt_box.frame_w, t.gt_box.frame_h],
        "question": t.question,
        "short_answer": t.short_answer,
        "long_answer": t.long_answer,
        "box_space": "pixel",
        "gt_box": t.gt_box.as_list(),
        "rounds": [_round_to_json(r) for r in t.rounds],
        "final_justification": t.final_justification,
        "distilled": None if t.distilled is None else _round_to_json(t.distilled),
        "scene": None
        if t.scene is None
        else scene_to_json(t.id, t.scene)["objects"],
        "flags": t.flags,
        "repairs": t.repairs,
    }
    for key, value in t.extras.items():
        record.setdefault(key, value)
    return record


def trace_from_json(record: dict) -> TraceRecord:
    _check_schema(record, TRACE_SCHEMA)
    w, h = (int(v) for v in record["image_size"])
    gt = BoxPx(*(int(v) for v in record["gt_box"]), w, h)
    rounds = [_round_from_json(r, w, h) for r in record["rounds"]]
    if not rounds:
        raise ValueError("trace has no rounds")
    scene = None
    if record.get("scene") is not None:
        scene = [
            SceneObject(
                object_id=int(o["object_id"]),
                category=o["category"],
                box=BoxPx(*(int(v) for v in o["box"]), w, h),
                depth_raw=float(o["depth_raw"]),
                depth_rank=o.get("depth_rank"),
            )
            for o in record["scene"]
        ]
    extras = {k: v for k, v in record.items() if k not in _TRACE_FIELDS}
    return TraceRecord(
        id=str(record["id"]),
        image=record.get("image", ""),
        question=record["question"],
        short_answer=record["short_answer"],
        long_answer=record.get("long_answer"),
        gt_box=gt,
        rounds=rounds,
        final_justification=record.get("final_justification", ""),
        distilled=None
        if record.get("distilled") is None
        else _round_from_json(record["distilled"], w, h),
        scene=scene,
        flags=list(record.get("flags", [])),
        repairs=list(record.get("repairs", [])),
        extras=extras,
    )


def save_traces(path, traces: list[TraceRecord]):
    _write_jsonl(path, (canonical_json(trace_to_json(t)) for t in traces))


def load_traces(path) -> tuple[list[TraceRecord], list[str]]:
    traces, diagnostics = [], []
    for lineno, line in _iter_jsonl(path):
        try:
            traces.append(trace_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, StoreError) as exc:
            diagnostics.append(f"{path}:{lineno}: {exc}")
    return traces, diagnostics


# ---------------------------------------------------------------- episodes


def _action_to_json(action) -> dict:
    if isinstance(action, ToolCall):
        return {"type": "tool_call", "bbox": action.bbox.as_list()}
    if isinstance(action, Answer):
        return {"type": "answer", "text": action.text}
    return {
        "type": "violation",
        "kind": action.kind,
        "detail": action.detail,
        "recovered": action.recovered_answer,
    }


def _action_from_json(obj: dict):
    kind = obj["type"]
    if kind == "tool_call":
        from .geometry import BoxRatio

        return ToolCall(BoxRatio(*obj["bbox"]))
    if kind == "answer":
        return Answer(obj["text"])
    return Violation(obj["kind"], obj.get("detail", ""), obj.get("recovered"))


def episode_to_json(e: Episode) -> dict:
    return {
        "schema": EPISODE_SCHEMA,
        "sample_id": e.sample_id,
        "image_size": [e.image_w, e.image_h],
        "box_space": "pixel",
        "r_max": e.r_max,
        "turns": [
            {
                "raw": t.turn.raw,
                "think": t.turn.think,
                "action": _action_to_json(t.turn.action),
                "accepted": t.accepted,
                "view_box": t.view_box.as_list(),
                "resized": t.resized,
            }
            for t in e.turns
        ],
        "final_answer": e.final_answer,
        "final_view_box": None if e.final_view_box is None else e.final_view_box.as_list(),
        "termination": e.termination,
    }


def episode_from_json(record: dict) -> Episode:
    _check_schema(record, EPISODE_SCHEMA)
    w, h = (int(v) for v in record["image_size"])
    episode = Episode(
        sample_id=str(record["sample_id"]),
        image_w=w,
        image_h=h,
        r_max=int(record["r_max"]),
        final_answer=record.get("final_answer"),
        final_view_box=None
        if record.get("final_view_box") is None
        else BoxPx(*(int(v) for v in record["final_view_box"]), w, h),
        termination=record["termination"],
    )
    for t in record["turns"]:
        episode.turns.append(
            TurnRecord(
                turn=Turn(
                    raw=t["raw"], think=t["think"], action=_action_from_json(t["action"])
                ),
                view_box=BoxPx(*(int(v) for v in t["view_box"]), w, h),
                accepted=bool(t["accepted"]),
                resized=bool(t["resized"]),
            )
        )
    return episode


def save_episodes(path, episodes: list[Episode]):
    _write_jsonl(path, (canonical_json(episode_to_json(e)) for e in episodes))


def load_episodes(path) -> tuple[list[Episode], list[str]]:
    episodes, diagnostics = [], []
    for lineno, line in _iter_jsonl(path):
        try:
            episodes.append(episode_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, StoreError) as exc:
            diagnostics.append(f"{path}:{lineno}: {exc}")
    return episodes, diagnostics


# ------------------------------------------------------------ depth/masks


def write_depth_raster(path, raster: DepthRaster):
    """Binary layout: magic, u32 width, u32 height, then float32 row-major."""
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", raster.width, raster.height))
        fh.write(raster.values.astype("<f4").tobytes(order="C"))


def load_depth_raster(path) -> tuple[DepthRaster, int]:
    """Read a depth raster; values are clamped to [0, 1] and the number of
    out-of-range samples is returned alongside."""
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise StoreError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise StoreError(f"{path}: truncated header")
    w, h = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * w * h
    if len(data) != expected:
        raise StoreError(f"{path}: payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data[12:], dtype="<f4").reshape(h, w).astype(np.float32)
    out_of_range = int(((values < 0.0) | (values > 1.0)).sum())
    return DepthRaster(w, h, np.clip(values, 0.0, 1.0)), out_of_range


def save_masks(path, masks: list[InstanceMask]):
    payload = [
        {
            "object_id": m.object_id,
            "category": m.category,
            "rle": list(m.rle),
            **({"provenance": m.provenance} if m.provenance else {}),
        }
        for m in masks
    ]
    Path(path).write_text(canonical_json(payload) + "\n", encoding="utf-8")


def load_masks(path, width: int, height: int) -> tuple[list[InstanceMask], list[str]]:
    """Masks must stay within the width x height raster; offenders are skipped."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StoreError(f"{path}: {exc}")
    if not isinstance(payload, list):
        raise StoreError(f"{path}: expected a JSON array of masks")
    masks, diagnostics = [], []
    for i, obj in enumerate(payload):
        try:
            mask = InstanceMask(
                object_id=int(obj["object_id"]),
                category=str(obj["category"]),
                rle=tuple(int(v) for v in obj["rle"]),
                provenance=str(obj.get("provenance", "")),
            )
            if mask.max_index() >= width * height:
                raise ValueError(f"mask exceeds {width}x{height} bounds")
            masks.append(mask)
        except (KeyError, TypeError, ValueError) as exc:
            diagnostics.append(f"{path}[{i}]: {exc}")
    return masks, diagnostics


# ---------------------------------------------------------------- manifest


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_manifest(counts: dict[str, int], files: dict[str, list]) -> dict:
    """``files`` maps a role (images/depth/masks/traces/...) to path lists."""
    entries: dict[str, list[dict]] = {}
    for role, paths in files.items():
        entries[role] = []
        for p in paths:
            p = Path(p)
            if p.exists():
                entries[role].append(
                    {"path": str(p), "sha256": file_sha256(p), "bytes": p.stat().st_size}
                )
            else:
                entries[role].append({"path": str(p), "absent": True})
    return {"schema": MANIFEST_SCHEMA, "counts": counts, "files": entries}


def verify_manifest(manifest: dict, root=".") -> list[str]:
    """Hash-check every referenced file; returns human-readable mismatches."""
    _check_schema(manifest, MANIFEST_SCHEMA)
    problems = []
    for role, entries in manifest.get("files", {}).items():
        for entry in entries:
            path = Path(root) / entry["path"]
            if entry.get("absent"):
                continue
            if not path.exists():
                problems.append(f"{role}: {entry['path']} is missing")
            elif file_sha256(path) != entry["sha256"]:
                problems.append(f"{role}: {entry['path']} hash mismatch")
    return problems


# ------------------------------------------------------------------ config


@dataclass
class Config:
    """Pipeline configuration; the endpoint credential stays in the environment."""

    endpoint_base_url: str = ""
    endpoint_model: str = ""
    credential_env: str = "ZOOMCOT_API_KEY"
    endpoint_timeout_s: float = 60.0
    endpoint_retries: int = 2
    r_max_2d: int = 3
    r_max_3d: int = 4
    area_ratio_n: float = 2.0
    tau_large: float = 0.30
    min_pixels: int = 12_544
    max_pixels: int = 262_144
    eval_r_max: int = 5
    workers: int = 4

    def policy_2d(self) -> GenPolicy:
        return GenPolicy(self.r_max_2d, self.area_ratio_n, self.tau_large)

    def policy_3d(self) -> GenPolicy:
        return GenPolicy(self.r_max_3d, self.area_ratio_n, self.tau_large)

    def budget(self) -> PixelBudget:
        return PixelBudget(self.min_pixels, self.max_pixels)


_CONFIG_TYPES = {
    "endpoint_timeout_s": float,
    "endpoint_retries": int,
    "r_max_2d": int,
    "r_max_3d": int,
    "area_ratio_n": float,
    "tau_large": float,
    "min_pixels": int,
    "max_pixels": int,
    "eval_r_max": int,
    "workers": int,
}


def parse_config(text: str) -> Config:
    """Line-oriented ``key = value`` format; ``#`` starts a comment."""
    config = Config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise StoreError(f"config line {lineno}: expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if not hasattr(config, key):
            raise StoreError(f"config line {lineno}: unknown key {key!r}")
        caster = _CONFIG_TYPES.get(key, str)
        try:
            setattr(config, key, caster(value))
        except ValueError:
            raise StoreError(f"config line {lineno}: bad value for {key!r}")
    _validate_config(config)
    return config


def _validate_config(config: Config):
    checks = [
        config.r_max_2d >= 1,
        config.r_max_3d >= 1,
        config.eval_r_max >= 1,
        config.area_ratio_n >= 1,
        0 < config.tau_large < 1,
        0 < config.min_pixels <= config.max_pixels,
        config.workers >= 1,
        config.endpoint_retries >= 0,
        config.endpoint_timeout_s > 0,
    ]
    if not all(checks):
        raise StoreError("config value out of documented range")


def load_config(path) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"))
