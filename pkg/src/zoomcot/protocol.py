"""Multi-round zoom evaluation: tag grammar, tool validation, episode loop.

One turn = mandatory <think> plus exactly one action: a zoom tool call or a
final answer. Malformed turns become Violation values (never exceptions),
consume their round, and leave the model on the previous view. Episodes are
bounded by a round budget and fully recorded for offline scoring.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Protocol

from . import imaging
from .generator_client import GenError, load_template
from .geometry import BoxPx, BoxRatio, local_to_global, ratio_to_px
from .imaging import DegenerateCrop, ImageView, PixelBudget

TOOL_NAME = "image_zoom_in_tool"

R_MAX_DEFAULT = 5  # benchmark interaction cap
R_MAX_PRO = 6  # localization benchmark cap


class ExtractionError(Exception):
    """Episode has no turns to extract an answer from."""


class MissingRoI(Exception):
    """Episode produced no usable box anywhere (scored as IoU 0)."""


class BoxRejection(ValueError):
    """A proposed tool box failed validation; carries the reason kind."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class ToolCall:
    bbox: BoxRatio


@dataclass(frozen=True)
class Answer:
    text: str


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str = ""
    recovered_answer: str | None = None


@dataclass(frozen=True)
class Turn:
    """One parsed model message: think text plus exactly one action."""

    raw: str
    think: str
    action: ToolCall | Answer | Violation


@dataclass
class TurnRecord:
    """A turn plus the harness state it was produced under."""

    turn: Turn
    view_box: BoxPx  # origin of the view the model was looking at
    accepted: bool  # whether the action advanced the episode
    resized: bool  # whether the view shown this round had been rescaled


@dataclass
class Episode:
    """Full bounded interaction for one sample."""

    sample_id: str
    image_w: int
    image_h: int
    r_max: int
    turns: list[TurnRecord] = field(default_factory=list)
    final_answer: str | None = None
    final_view_box: BoxPx | None = None  # set once >= 1 valid zoom occurred
    termination: str = "protocol_failure"  # answered | budget_exhausted | protocol_failure


_THINK = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_TOOL = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)
_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


def validate_bbox(values) -> BoxRatio:
    """Accept a raw 4-vector only if it is already a valid ratio box.

    No repair at evaluation time: wrong count, non-numeric entries, values
    outside [0, 1], or inverted/empty extents are all rejections.
    """
    try:
        count = len(values)
    except TypeError:
        raise BoxRejection("count", "not a sequence")
    if count != 4:
        raise BoxRejection("count", f"expected 4 values, got {count}")
    floats = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise BoxRejection("numeric", repr(v))
        floats.append(float(v))
    if any(v < 0.0 or v > 1.0 for v in floats):
        raise BoxRejection("range", f"{floats}")
    x1, y1, x2, y2 = floats
    if not (x1 < x2 and y1 < y2):
        raise BoxRejection("order", f"{floats}")
    return BoxRatio(x1, y1, x2, y2)


def parse_turn(raw: str) -> Turn:
    """Classify a raw model message under the strict tag grammar.

    Violations are values, not errors: mixed/duplicated actions, a missing
    think segment, unknown tools, malformed JSON, and invalid boxes each map
    to a Violation kind. An answer accompanying a violation is kept for the
    extraction fallback.
    """
    thinks = _THINK.findall(raw)
    tools = _TOOL.findall(raw)
    answers = _ANSWER.findall(raw)
    think = thinks[0].strip() if thinks else ""
    recovered = answers[0].strip() if answers else None

    if tools and answers:
        return Turn(raw, think, Violation("mixed", "tool call and answer together", recovered))
    if len(tools) > 1 or len(answers) > 1:
        return Turn(raw, think, Violation("mixed", "duplicated action tags", recovered))
    if not thinks:
        if answers or tools:
            return Turn(raw, think, Violation("missing_think", recovered_answer=recovered))
        return Turn(raw, think, Violation("missing_think"))
    if answers:
        return Turn(raw, think, Answer(recovered))
    if not tools:
        return Turn(raw, think, Violation("no_action"))

    try:
        call = json.loads(tools[0])
    except json.JSONDecodeError as exc:
        return Turn(raw, think, Violation("bad_tool_json", str(exc)))
    if not isinstance(call, dict):
        return Turn(raw, think, Violation("bad_tool_json", "tool call is not an object"))
    if call.get("name") != TOOL_NAME:
        return Turn(raw, think, Violation("wrong_tool", str(call.get("name"))))
    args = call.get("arguments")
    if not isinstance(args, dict) or "bbox_2d" not in args:
        return Turn(raw, think, Violation("bad_tool_json", "missing arguments.bbox_2d"))
    try:
        box = validate_bbox(args["bbox_2d"])
    except BoxRejection as exc:
        return Turn(raw, think, Violation("invalid_box", exc.reason))
    return Turn(raw, think, ToolCall(box))


def execute_zoom(
    current: ImageView, original: ImageView, b: BoxRatio, budget: PixelBudget
) -> tuple[ImageView, bool]:
    """Crop the region ``b`` of the current view out of the original image.

    The ratio box is interpreted on the current view, mapped to global
    pixels, cropped from the full-resolution image, and resized into the
    pixel budget. Returns (view, whether resizing changed its size).
    """
    global_box = local_to_global(b, current.origin_box)
    cropped = imaging.crop(original, global_box)
    resized = imaging.resize_to_budget(cropped, budget)
    return resized, resized.pixels.shape[:2] != cropped.pixels.shape[:2]


class TurnModel(Protocol):
    def respond(self, history: list[dict], view: ImageView) -> str: ...


@dataclass
class ScriptedTurnModel:
    """Replays a fixed list of raw turn texts; repeats the last one after that."""

    turns: list[str]

    def respond(self, history: list[dict], view: ImageView) -> str:
        index = sum(1 for m in history if m.get("role") == "assistant")
        return self.turns[min(index, len(self.turns) - 1)]


def _history_entry(role: str, text: str, view: ImageView | None = None) -> dict:
    entry = {"role": role, "text": text}
    if view is not None:
        entry["view_box"] = view.origin_box.as_list()
    return entry


def run_episode(
    sample_id: str,
    image: ImageView,
    question: str,
    model: TurnModel,
    r_max: int = R_MAX_DEFAULT,
    budget: PixelBudget = PixelBudget(),
) -> Episode:
    """Drive the zoom-or-answer loop until an answer or the round budget.

    Invalid proposals (any Violation) consume their round and keep the
    current view; transport errors end the episode as a protocol failure
    with the partial transcript preserved.
    """
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    episode = Episode(sample_id, image.width, image.height, r_max)
    current = imaging.resize_to_budget(image, budget)
    current_resized = current.pixels.shape[:2] != image.pixels.shape[:2]
    history = [
        _history_entry("system", load_template("zoom_system")),
        _history_entry("user", load_template("first_round") + "\n\nQuestion: " + question, current),
    ]
    for _ in range(r_max):
        try:
            raw = model.respond(history, current)
        except GenError:
            episode.termination = "protocol_failure"
            return episode
        turn = parse_turn(raw)
        record = TurnRecord(
            turn=turn,
            view_box=current.origin_box,
            accepted=not isinstance(turn.action, Violation),
            resized=current_resized,
        )
        episode.turns.append(record)
        history.append(_history_entry("assistant", raw))

        if isinstance(turn.action, Answer):
            episode.final_answer = turn.action.text
            episode.termination = "answered"
            return episode
        if isinstance(turn.action, ToolCall):
            try:
                current, current_resized = execute_zoom(
                    current, image, turn.action.bbox, budget
                )
                episode.final_view_box = current.origin_box
            except DegenerateCrop:
                record.accepted = False  # discarded proposal, stay on previous view
        history.append(
            _history_entry(
                "user", load_template("later_round") + "\n\n(zoomed-in view)", current
            )
        )
    episode.termination = "budget_exhausted"
    return episode


def extract_answer(episode: Episode) -> str:
    """Final answer text, falling back to the raw final message when untagged."""
    if not episode.turns:
        raise ExtractionError(f"episode {episode.sample_id} has no turns")
    last = episode.turns[-1].turn
    if isinstance(last.action, Answer):
        return last.action.text
    if isinstance(last.action, Violation) and last.action.recovered_answer is not None:
        return last.action.recovered_answer
    return last.raw.strip()


_FIRST_TURN_BOX = re.compile(
    r"\[\s*([0-9.eE+-]+)\s*[,;\s]\s*([0-9.eE+-]+)\s*[,;\s]\s*([0-9.eE+-]+)\s*[,;\s]\s*([0-9.eE+-]+)\s*\]"
)


def final_roi(episode: Episode) -> BoxPx:
    """Predicted RoI in the global frame.

    Multi-round models: the origin box of the view active when the answer
    was produced (the last valid zoom). Single-step models that never zoom:
    the one ratio box found in their first turn's text.
    """
    if episode.final_view_box is not None:
        return episode.final_view_box
    if episode.turns:
        first = episode.turns[0].turn
        for m in _FIRST_TURN_BOX.finditer(first.raw):
            try:
                box = validate_bbox([float(v) for v in m.groups()])
            except (BoxRejection, ValueError):
                continue
            return ratio_to_px(box, episode.image_w, episode.image_h)
    raise MissingRoI(f"episode {episode.sample_id} produced no usable box")
