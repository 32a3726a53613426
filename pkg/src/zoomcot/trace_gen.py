"""Multi-round trace generation: describe, localize, zoom, verify.

Drives a generator client through the global-to-local refinement loop:
each round yields a (description, RoI, rationale) triple, the RoI is
adjusted to cover the ground-truth box, and refinement stops once the RoI
area is within the configured multiple of the GT area or the round budget
runs out. Large targets skip refinement entirely and get a single step.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

from . import imaging
from .generator_client import (
    GenError,
    GenRequest,
    GeneratorClient,
    QAResponse,
    TripletResponse,
    load_template,
    parse_qa,
    parse_triplet,
)
from .geometry import (
    BoxPx,
    GeometryError,
    adjust_roi,
    area,
    intersect_box,
    local_to_global,
    px_to_ratio,
    ratio_to_px,
    sanitize_raw,
    union_box,
)
from .grounding_parser import GroundingEntry, render_annotation
from .imaging import ImageView
from .scene3d import SceneObject, localize_objects


class TraceError(Exception):
    """Generation failed; carries whatever rounds were completed."""

    def __init__(self, message: str, rounds: list | None = None):
        super().__init__(message)
        self.rounds = rounds or []


class DistillError(Exception):
    """Distilled rationale could not be produced."""


class ConsistencyError(Exception):
    """A trace cannot be repaired (GT box outside its frame)."""


@dataclass(frozen=True)
class GenPolicy:
    """Refinement knobs: round budget, area-ratio stop, large-object skip."""

    r_max: int = 3
    area_ratio_n: float = 2.0
    tau_large: float = 0.30
    parse_retries: int = 2

    def __post_init__(self):
        if self.r_max < 1 or self.area_ratio_n < 1 or not 0 < self.tau_large < 1:
            raise ValueError(f"invalid policy {self}")

    @classmethod
    def depth_aware(cls, **overrides) -> "GenPolicy":
        defaults = {"r_max": 4}
        defaults.update(overrides)
        return cls(**defaults)


@dataclass(frozen=True)
class CoTRound:
    """One reasoning step: scene description, RoI (global pixels), rationale."""

    description: str
    roi: BoxPx
    rationale: str
    round_index: int


@dataclass
class TraceRecord:
    """A full generated sample: QA, GT box, ordered rounds, final justification."""

    id: str
    image: str
    question: str
    short_answer: str
    gt_box: BoxPx
    rounds: list[CoTRound]
    long_answer: str | None = None
    final_justification: str = ""
    distilled: CoTRound | None = None
    scene: list[SceneObject] | None = None
    flags: list[str] = field(default_factory=list)
    repairs: list[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def _render_scene_context(objs: list[SceneObject]) -> str:
    rows = []
    for o in objs:
        b = px_to_ratio(o.box)
        rows.append(
            {
                "category": o.category,
                "bbox": [round(v, 4) for v in b.as_list()],
                "depth": round(o.depth_raw, 4),
                "rank": o.depth_rank,
            }
        )
    return json.dumps(rows)


def _query_triplet(
    gen: GeneratorClient,
    template_id: str,
    view: ImageView,
    question: str,
    answer: str,
    policy: GenPolicy,
    context: str = "",
) -> TripletResponse | None:
    text = load_template(template_id)
    text += f"\n\nQuestion: {question}\nAnswer: {answer}\n"
    if context:
        text += f"Objects:\n{context}\n"
    request = GenRequest(template_id, text, (imaging.encode_image(view),))
    for _ in range(1 + policy.parse_retries):
        try:
            return parse_triplet(gen.complete(request))
        except GenError:
            continue
    return None


def _query_justification(
    gen: GeneratorClient, view: ImageView, question: str, answer: str, gt: BoxPx
) -> str | None:
    text = load_template("final_justify").format(
        gt_box=gt.as_list(), question=question, answer=answer
    )
    request = GenRequest("final_justify", text, (imaging.encode_image(view),))
    try:
        return gen.complete(request).strip()
    except GenError:
        return None


def _generate_rounds(
    sample_question: str,
    sample_answer: str,
    image: ImageView,
    gt: BoxPx,
    policy: GenPolicy,
    gen: GeneratorClient,
    scene: list[SceneObject] | None,
    template_id: str,
) -> tuple[list[CoTRound], BoxPx, list[str]]:
    """Shared refinement loop; returns (rounds, final roi, flags)."""
    flags: list[str] = []
    frame_area = image.width * image.height

    def context_for(region: BoxPx | None) -> str:
        if scene is None:
            return ""
        local = scene if region is None else localize_objects(scene, region)
        if not local:
            flags.append("empty_scene_context")
            return "[]"
        return _render_scene_context(local)

    triplet = _query_triplet(
        gen, template_id, image, sample_question, sample_answer, policy, context_for(None)
    )
    if triplet is None:
        raise TraceError("round 1 produced no parseable triplet")
    current = adjust_roi(ratio_to_px(triplet.aoi, image.width, image.height), gt)
    rounds = [CoTRound(triplet.description, current, triplet.reasoning, 1)]

    if area(gt) / frame_area >= policy.tau_large:
        flags.append("large_object_skip")
        return rounds, current, flags

    rounds_used = 1
    while rounds_used < policy.r_max and area(current) > policy.area_ratio_n * area(gt):
        view = imaging.crop(image, current)
        triplet = _query_triplet(
            gen, template_id, view, sample_question, sample_answer, policy,
            context_for(current),
        )
        rounds_used += 1
        if triplet is None:
            flags.append(f"round_{rounds_used}_dropped")
            continue
        current = adjust_roi(local_to_global(triplet.aoi, current), gt)
        rounds.append(
            CoTRound(triplet.description, current, triplet.reasoning, len(rounds) + 1)
        )
    if area(current) > policy.area_ratio_n * area(gt):
        flags.append("round_budget_exhausted")
    return rounds, current, flags


def _finalize(
    record: TraceRecord,
    image: ImageView,
    final_roi: BoxPx,
    gen: GeneratorClient,
) -> TraceRecord:
    view = imaging.crop(image, final_roi)
    justification = _query_justification(
        gen, view, record.question, record.short_answer, record.gt_box
    )
    if justification is None:
        record.flags.append("no_final_justification")
    else:
        record.final_justification = justification
    return record


def generate_trace_2d(sample, image: ImageView, policy: GenPolicy, gen: GeneratorClient) -> TraceRecord:
    """Run the 2D refinement loop for one sample.

    ``sample`` provides id, question, short_answer, optional long_answer,
    and gt_box (global pixel coordinates matching ``image``'s frame).
    """
    gt = sample.gt_box
    rounds, final, flags = _generate_rounds(
        sample.question, sample.short_answer, image, gt, policy, gen, None,
        "triplet_full_image",
    )
    record = TraceRecord(
        id=sample.id,
        image=getattr(sample, "image_path", ""),
        question=sample.question,
        short_answer=sample.short_answer,
        long_answer=getattr(sample, "long_answer", None),
        gt_box=gt,
        rounds=rounds,
        flags=flags,
    )
    return _finalize(record, image, final, gen)


def generate_trace_3d(
    sample,
    image: ImageView,
    scene: list[SceneObject],
    policy: GenPolicy,
    gen: GeneratorClient,
    qa_gen: GeneratorClient | None = None,
) -> TraceRecord:
    """Depth-aware variant: every round's prompt carries the local object list.

    When the sample has no QA and a QA generator is supplied, a fresh
    depth-aware QA pair (and GT box) is requested first.
    """
    question = getattr(sample, "question", "") or ""
    short_answer = getattr(sample, "short_answer", "") or ""
    long_answer = getattr(sample, "long_answer", None)
    gt = getattr(sample, "gt_box", None)
    if (not question or gt is None) and qa_gen is not None:
        qa = _query_qa(qa_gen, image, scene)
        question, short_answer, long_answer = qa.question, qa.short_answer, qa.long_answer
        gt = ratio_to_px(qa.target_box, image.width, image.height)
    if gt is None:
        raise TraceError("sample has no GT box and no QA generator was provided")

    rounds, final, flags = _generate_rounds(
        question, short_answer, image, gt, policy, gen, scene, "round_3d"
    )
    record = TraceRecord(
        id=sample.id,
        image=getattr(sample, "image_path", ""),
        question=question,
        short_answer=short_answer,
        long_answer=long_answer,
        gt_box=gt,
        rounds=rounds,
        scene=scene,
        flags=flags,
    )
    return _finalize(record, image, final, gen)


def _query_qa(qa_gen: GeneratorClient, image: ImageView, scene: list[SceneObject]) -> QAResponse:
    text = load_template("qa_3d") + "\n\nObjects:\n" + _render_scene_context(scene)
    request = GenRequest("qa_3d", text, (imaging.encode_image(image),))
    try:
        return parse_qa(qa_gen.complete(request))
    except GenError as exc:
        raise TraceError(f"QA generation failed: {exc}")


_CROP_MENTIONS = re.compile(r"\b(zoom\w*|crop\w*|previous view|earlier (?:round|step)|recursion)\b", re.IGNORECASE)


def mentions_intermediate_crops(text: str) -> bool:
    return _CROP_MENTIONS.search(text) is not None


def distill_single_round(trace: TraceRecord, gen: GeneratorClient) -> CoTRound:
    """Compress a multi-round trace into one step anchored at the final RoI.

    The distilled text must not mention intermediate zooms or crops; one
    retry is allowed before giving up.
    """
    if not trace.rounds:
        raise DistillError("trace has no rounds")
    chain = "\n".join(
        f"Round {r.round_index}: {r.description} | RoI {r.roi.as_list()} | {r.rationale}"
        for r in trace.rounds
    )
    text = load_template("distill") + "\n\nTrace:\n" + chain
    request = GenRequest("distill", text)
    for _ in range(2):
        try:
            candidate = gen.complete(request).strip()
        except GenError as exc:
            raise DistillError(str(exc))
        if not mentions_intermediate_crops(candidate):
            return CoTRound(
                description=trace.rounds[-1].description,
                roi=trace.rounds[-1].roi,
                rationale=candidate,
                round_index=1,
            )
    raise DistillError("distilled text kept mentioning intermediate crops")


def scene_grounding_entries(scene: list[SceneObject], frame_w: int, frame_h: int) -> list[GroundingEntry]:
    """Ratio-box grounding entries for a scene, ready for rationale augmentation."""
    entries = []
    for obj in scene:
        box = obj.box
        if (box.frame_w, box.frame_h) != (frame_w, frame_h):
            raise GeometryError("scene boxes must be in the image's global frame")
        entries.append(
            GroundingEntry(
                name=obj.category.lower(),
                bbox_ratio=px_to_ratio(box),
                depth01=obj.depth_raw,
            )
        )
    return entries


def augment_grounding(text: str, entries: list[GroundingEntry]) -> str:
    """Insert ``([box], depth)`` right after every mention of a known object.

    Pure insertion: the original wording is preserved verbatim, objects that
    are not mentioned are not added, and a box-only annotation is used when
    an entry has no depth.
    """
    spans: list[tuple[int, int, str]] = []
    taken: list[tuple[int, int]] = []
    for entry in sorted(entries, key=lambda e: -len(e.name)):
        pattern = re.compile(rf"\b{re.escape(entry.name)}\b", re.IGNORECASE)
        for m in pattern.finditer(text):
            if any(m.start() < e and s < m.end() for s, e in taken):
                continue  # inside a longer object name already annotated
            taken.append((m.start(), m.end()))
            spans.append((m.end(), m.start(), render_annotation(entry)))
    out, cursor = [], 0
    for end, _, annotation in sorted(spans):
        out.append(text[cursor:end])
        out.append(f" {annotation}")
        cursor = end
    out.append(text[cursor:])
    return "".join(out)


def consistency_fix(trace: TraceRecord) -> TraceRecord:
    """Repair a trace's RoIs: in-frame, GT-covering, monotonically shrinking.

    Each round's box is clipped to the frame, intersected with the previous
    round's (repaired) box, and re-expanded to cover GT. Every change is
    logged in the returned record's ``repairs``.
    """
    gt = trace.gt_box
    frame = (gt.frame_w, gt.frame_h)
    gt_clipped = sanitize_raw(gt.as_list(), *frame)
    if gt_clipped is None or gt_clipped != gt:
        raise ConsistencyError(f"GT box {gt.as_list()} is not usable in frame {frame}")

    repairs = list(trace.repairs)
    fixed_rounds: list[CoTRound] = []
    previous: BoxPx | None = None
    for r in trace.rounds:
        box = r.roi
        if (box.frame_w, box.frame_h) != frame:
            raise ConsistencyError(
                f"round {r.round_index}: frame {box.frame_w}x{box.frame_h} != {frame}"
            )
        candidate = sanitize_raw(box.as_list(), *frame)
        if candidate is None:
            candidate = gt
            repairs.append(f"round {r.round_index}: box empty after clipping, reset to GT")
        elif candidate != box:
            repairs.append(f"round {r.round_index}: clipped to frame")
        if previous is not None:
            inside = intersect_box(candidate, previous)
            if inside is None:
                inside = gt
            if inside != candidate:
                repairs.append(f"round {r.round_index}: intersected with previous RoI")
            candidate = inside
        fixed = union_box(candidate, gt) if candidate != gt else gt
        if fixed != candidate:
            repairs.append(f"round {r.round_index}: expanded to cover GT")
        fixed = adjust_roi(fixed, gt)
        fixed_rounds.append(replace(r, roi=fixed))
        previous = fixed

    distilled = trace.distilled
    if distilled is not None and fixed_rounds and distilled.roi != fixed_rounds[-1].roi:
        distilled = replace(distilled, roi=fixed_rounds[-1].roi)
        repairs.append("distilled: re-pinned to repaired final RoI")
    return replace_trace(trace, rounds=fixed_rounds, distilled=distilled, repairs=repairs)


def replace_trace(trace: TraceRecord, **changes) -> TraceRecord:
    fields = dict(
        id=trace.id,
        image=trace.image,
        question=trace.question,
        short_answer=trace.short_answer,
        gt_box=trace.gt_box,
        rounds=trace.rounds,
        long_answer=trace.long_answer,
        final_justification=trace.final_justification,
        distilled=trace.distilled,
        scene=trace.scene,
        flags=list(trace.flags),
        repairs=list(trace.repairs),
        extras=dict(trace.extras),
    )
    fields.update(changes)
    return TraceRecord(**fields)
