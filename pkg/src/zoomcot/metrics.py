"""Quantitative evaluation: RoI accuracy, grounding quality, judge scores,
macro-averaging, and corpus statistics.

All aggregations are pure; IoU values come from the geometry module so
reports and tests share a single code path.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .geometry import iou
from .grounding_parser import GroundingEntry

ROI_THRESHOLDS = (0.5, 0.75)


class JudgeParseError(Exception):
    """Grader output contained no score token."""


@dataclass
class RoIReport:
    """Per-sample IoUs plus strict-threshold accuracies."""

    per_sample_iou: list[float]
    accuracy: dict[float, float]

    @property
    def n(self) -> int:
        return len(self.per_sample_iou)


@dataclass
class GroundingReport:
    """Pooled grounding quality over a benchmark."""

    grounded_ratio: float | None
    mean_iou: float | None
    mean_depth_err: float | None
    total_gt: int
    total_missed: int
    total_matched: int
    name_matching: str = "exact-lowercase"


@dataclass
class StatsReport:
    """Corpus statistics: round histogram, area fractions, response lengths."""

    round_histogram: dict[int, int]
    mean_gt_area_fraction: float
    mean_roi_area_fraction: float
    mean_response_length: dict[int, float]
    length_unit: str = "chars"
    sample_count: int = 0


def roi_accuracy(preds, thresholds=ROI_THRESHOLDS) -> RoIReport:
    """Accuracy at each threshold over (predicted box or None, GT box) pairs.

    A missing prediction scores IoU 0. The comparison is strict (IoU must
    exceed the threshold), so a tie at exactly 0.5 does not count.
    """
    ious = []
    for pred, gt in preds:
        ious.append(0.0 if pred is None else iou(pred, gt).value)
    accuracy = {}
    for t in thresholds:
        accuracy[t] = sum(1 for v in ious if v > t) / len(ious) if ious else 0.0
    return RoIReport(per_sample_iou=ious, accuracy=accuracy)


def match_groundings(pred: dict, gt: dict) -> tuple[set[str], set[str]]:
    """(matched, missed) name sets; prediction-only names carry no penalty."""
    matched = set(gt) & set(pred)
    missed = set(gt) - set(pred)
    return matched, missed


def depth_abs_err(pred_depth: float | None, gt_depth: float | None) -> float | None:
    """Absolute depth error in [0, 1]; None when either side is absent."""
    if pred_depth is None or gt_depth is None:
        return None
    return abs(pred_depth - gt_depth)


def grounding_metrics(
    samples: list[tuple[dict[str, GroundingEntry], dict[str, GroundingEntry]]]
) -> GroundingReport:
    """Pool (predicted, ground-truth) grounding dicts over samples.

    grounded_ratio = 1 - missed/|G| over the pooled counts; IoU and depth
    error are averaged over all matched objects across all samples (depth
    pairs with an absent side are excluded from the depth mean).
    """
    total_gt = total_missed = total_matched = 0
    iou_values: list[float] = []
    depth_errors: list[float] = []
    for pred, gt in samples:
        matched, missed = match_groundings(pred, gt)
        total_gt += len(gt)
        total_missed += len(missed)
        total_matched += len(matched)
        for name in matched:
            iou_values.append(iou(pred[name].bbox_ratio, gt[name].bbox_ratio).value)
            err = depth_abs_err(pred[name].depth01, gt[name].depth01)
            if err is not None:
                depth_errors.append(err)
    return GroundingReport(
        grounded_ratio=None if total_gt == 0 else 1.0 - total_missed / total_gt,
        mean_iou=sum(iou_values) / len(iou_values) if iou_values else None,
        mean_depth_err=sum(depth_errors) / len(depth_errors) if depth_errors else None,
        total_gt=total_gt,
        total_missed=total_missed,
        total_matched=total_matched,
    )


_SCORE = re.compile(r"score\s*:\s*([-+]?\d*\.?\d+)", re.IGNORECASE)


@dataclass(frozen=True)
class JudgeScore:
    value: float
    lenient: bool = False  # score token was embedded in other text
    clamped: bool = False  # raw value fell outside [0, 1]


def parse_judge_score(raw: str) -> JudgeScore:
    """Extract the last ``score: <value>`` token and clamp it into [0, 1]."""
    matches = list(_SCORE.finditer(raw))
    if not matches:
        raise JudgeParseError(f"no score token in {raw[:80]!r}")
    m = matches[-1]
    value = float(m.group(1))
    clamped = value < 0.0 or value > 1.0
    value = max(0.0, min(1.0, value))
    lenient = m.group(0).strip() != raw.strip()
    return JudgeScore(value=value, lenient=lenient, clamped=clamped)


def macro_average(per_dataset) -> float:
    """Unweighted mean of per-dataset means; sample counts never matter."""
    if not per_dataset:
        raise ValueError("macro_average needs at least one dataset")
    means = []
    for scores in per_dataset.values():
        if isinstance(scores, (int, float)):
            means.append(float(scores))
        else:
            scores = list(scores)
            means.append(sum(scores) / len(scores))
    return sum(means) / len(means)


def normalize_answer(text: str) -> str:
    """Case-fold, collapse whitespace, and strip surrounding punctuation."""
    folded = " ".join(text.casefold().split())
    return folded.strip(" .,:;!?\"'")


def _length(text: str, unit: str) -> int:
    return len(text.split()) if unit == "tokens" else len(text)


def dataset_stats(traces, length_unit: str = "chars") -> StatsReport:
    """Round histogram, mean GT/RoI area fractions, response length per round.

    Both the GT-box and final-RoI area fractions are reported since either
    can be read as the evidence footprint of a sample.
    """
    histogram: dict[int, int] = {k: 0 for k in (1, 2, 3, 4)}
    gt_fractions: list[float] = []
    roi_fractions: list[float] = []
    lengths: dict[int, list[int]] = {}
    for t in traces:
        histogram[len(t.rounds)] = histogram.get(len(t.rounds), 0) + 1
        frame_area = t.gt_box.frame_w * t.gt_box.frame_h
        gt_fractions.append(t.gt_box.width * t.gt_box.height / frame_area)
        last = t.rounds[-1].roi
        roi_fractions.append(last.width * last.height / frame_area)
        for r in t.rounds:
            lengths.setdefault(r.round_index, []).append(_length(r.rationale, length_unit))
    return StatsReport(
        round_histogram=histogram,
        mean_gt_area_fraction=sum(gt_fractions) / len(gt_fractions) if gt_fractions else 0.0,
        mean_roi_area_fraction=sum(roi_fractions) / len(roi_fractions) if roi_fractions else 0.0,
        mean_response_length={
            k: sum(v) / len(v) for k, v in sorted(lengths.items())
        },
        length_unit=length_unit,
        sample_count=len(gt_fractions),
    )


def _format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [
        max(len(str(cell)) for cell in column)
        for column in zip(header, *rows)
    ]
    def fmt(cells):
        return " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in rows])


def render_roi_table(reports: dict[str, RoIReport]) -> str:
    """Aligned-column detection table: IoU@0.5 / IoU@0.75 rows per model column."""
    names = list(reports)
    thresholds = sorted({t for r in reports.values() for t in r.accuracy})
    header = ["Accuracy"] + names
    rows = [
        [f"IoU@{t:g}"] + [f"{reports[n].accuracy[t]:.2f}" for n in names]
        for t in thresholds
    ]
    return _format_table(header, rows)


def render_grounding_table(reports: dict[str, GroundingReport]) -> str:
    """Aligned-column grounding table: ratio / box IoU / depth error rows."""
    names = list(reports)
    def cell(value):
        return "n/a" if value is None else f"{value:.3f}"
    header = [""] + names
    rows = [
        ["Grounded Ratio"] + [cell(reports[n].grounded_ratio) for n in names],
        ["BBox (IoU)"] + [cell(reports[n].mean_iou) for n in names],
        ["Depth (Abs Diff)"] + [cell(reports[n].mean_depth_err) for n in names],
    ]
    return _format_table(header, rows)
