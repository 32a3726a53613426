"""Extraction of spatial annotations like ``car: ([0.1, 0.2, 0.4, 0.6], 0.3)``
from reasoning text.

The pattern tolerates commas, semicolons, or whitespace between coordinates,
an optional colon after the object name, and an optional depth token. Box
values may be ratios, percentages (divided by 100), or pixels (normalized by
the frame when its dimensions are known). Depths may be numeric or the
symbolic levels near / mid(dle) / far.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .geometry import BoxRatio

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_SEP = r"(?:\s*[,;]\s*|\s+)"
_WORD = r"[A-Za-z0-9][A-Za-z0-9'\-]*"

# name [:] ( [x1, y1, x2, y2] [, depth] )
_ANNOTATION = re.compile(
    rf"(?P<name>{_WORD}(?:[ \t]{_WORD}){{0,3}})\s*(?P<colon>:)?\s*"
    rf"\(\s*\[\s*(?P<x1>{_NUM}){_SEP}(?P<y1>{_NUM}){_SEP}(?P<x2>{_NUM}){_SEP}(?P<y2>{_NUM})\s*\]"
    rf"\s*(?:[,;]\s*(?P<depth>{_NUM}|[A-Za-z]+))?\s*\)"
)

# Connectives that cannot start an object name; a colon-delimited capture is
# trimmed to the words following the last of these.
_STOPWORDS = {
    "the", "a", "an", "and", "or", "then", "later", "now", "also", "with",
    "of", "on", "in", "at", "is", "are", "was", "were", "see", "sees",
    "near", "behind", "above", "below", "i", "we", "there",
}

_SYMBOLIC_DEPTH = {"near": 0.2, "mid": 0.5, "middle": 0.5, "far": 0.8}

# Unit inference: coordinates <= RATIO_MAX are ratios, <= PERCENT_MAX are
# percentages, anything larger is pixels and needs frame dimensions.
RATIO_MAX = 1.5
PERCENT_MAX = 150.0


@dataclass(frozen=True)
class GroundingEntry:
    """One parsed object annotation: lowercased name, ratio box, optional depth."""

    name: str
    bbox_ratio: BoxRatio
    depth01: float | None = None


@dataclass
class GroundingScan:
    """Parse output: entries keyed by name (last mention wins) plus skip diagnostics."""

    entries: dict[str, GroundingEntry] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)


def normalize_box_units(values, frame=None) -> BoxRatio | None:
    """Coerce a raw 4-vector into a valid ratio box, or None when impossible.

    Ratios pass through; values in (1.5, 150] are treated as percentages;
    larger values as pixels, divided by the frame dims when available.
    Coordinates are order-corrected then clipped to [0, 1]; a box that is
    degenerate after clipping is rejected.
    """
    if len(values) != 4:
        return None
    try:
        x1, y1, x2, y2 = (float(v) for v in values)
    except (TypeError, ValueError):
        return None
    peak = max(abs(x1), abs(y1), abs(x2), abs(y2))
    if peak > PERCENT_MAX:
        if frame is None:
            return None
        w, h = frame
        x1, x2 = x1 / w, x2 / w
        y1, y2 = y1 / h, y2 / h
    elif peak > RATIO_MAX:
        x1, y1, x2, y2 = x1 / 100, y1 / 100, x2 / 100, y2 / 100
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    x1, y1 = max(0.0, min(1.0, x1)), max(0.0, min(1.0, y1))
    x2, y2 = max(0.0, min(1.0, x2)), max(0.0, min(1.0, y2))
    if x1 >= x2 or y1 >= y2:
        return None
    return BoxRatio(x1, y1, x2, y2)


def normalize_depth(token) -> float | None:
    """Map a raw depth token onto [0, 1], or None when unrecognized.

    Numeric values in (1, 100] are read as percentages; everything numeric
    is clamped to [0, 1]. Symbolic near/mid/middle/far map to 0.2/0.5/0.8.
    """
    if token is None:
        return None
    text = str(token).strip().lower()
    if not text:
        return None
    if text in _SYMBOLIC_DEPTH:
        return _SYMBOLIC_DEPTH[text]
    try:
        value = float(text)
    except ValueError:
        return None
    if value != value:  # NaN
        return None
    if 1.0 < value <= 100.0:
        value /= 100.0
    return max(0.0, min(1.0, value))


def _normalize_name(raw: str, had_colon: bool) -> str:
    words = raw.lower().split()
    if not had_colon:
        # Without a delimiter the capture swallows preceding sentence words;
        # only the token adjacent to the annotation is the name.
        return words[-1]
    for i in range(len(words) - 1, 0, -1):
        if words[i - 1] in _STOPWORDS:
            return " ".join(words[i:])
    return " ".join(words)


def parse_groundings(text: str, frame=None) -> GroundingScan:
    """Scan text for object annotations; later duplicates overwrite earlier ones."""
    scan = GroundingScan()
    for m in _ANNOTATION.finditer(text):
        name = _normalize_name(m.group("name"), m.group("colon") is not None)
        box = normalize_box_units(
            (m.group("x1"), m.group("y1"), m.group("x2"), m.group("y2")), frame
        )
        if box is None:
            scan.diagnostics.append(
                f"skipped {name!r}: unusable box {m.group(0)[:80]!r}"
            )
            continue
        depth = normalize_depth(m.group("depth"))
        if m.group("depth") is not None and depth is None:
            scan.diagnostics.append(
                f"{name!r}: unrecognized depth token {m.group('depth')!r}"
            )
        scan.entries[name] = GroundingEntry(name=name, bbox_ratio=box, depth01=depth)
    return scan


def render_annotation(entry: GroundingEntry) -> str:
    """Render the parenthesized box/depth group for one entry."""
    b = entry.bbox_ratio
    inner = f"[{b.x1}, {b.y1}, {b.x2}, {b.y2}]"
    if entry.depth01 is None:
        return f"({inner})"
    return f"({inner}, {entry.depth01})"


def render_entries(entries: dict[str, GroundingEntry]) -> str:
    """One ``name: (...)`` line per entry; parses back to the same entries."""
    return "\n".join(f"{name}: {render_annotation(e)}" for name, e in entries.items())
