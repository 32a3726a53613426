"""Boundary to any vision-language endpoint used for trace generation.

Requests are assembled from versioned prompt templates; responses come back
as raw text and are parsed here. A deterministic scripted oracle implements
the same client interface for tests and offline pipelines.
"""

from __future__ import annotations

import base64
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

import httpx

from .geometry import BoxRatio
from .grounding_parser import normalize_box_units

# template id -> (asset file, number of image payloads the template expects)
TEMPLATES = {
    "zoom_system": ("zoom_system.txt", 0),
    "first_round": ("first_round.txt", 1),
    "later_round": ("later_round.txt", 1),
    "triplet_full_image": ("triplet_full_image.txt", 1),
    "qa_3d": ("qa_3d.txt", 1),
    "round_3d": ("round_3d.txt", 1),
    "distill": ("distill.txt", 0),
    "grounding_augment": ("grounding_augment.txt", 0),
    "judge": ("judge.txt", 0),
    "final_justify": ("final_justify.txt", 1),
}


class GenError(Exception):
    """Base class for generation-side failures."""


class GenConfigError(GenError):
    """Client is not configured well enough to attempt a request."""


class GenTimeoutError(GenError):
    """Request exceeded the configured timeout."""


class GenTransportError(GenError):
    """Network-level failure before a response arrived."""


class GenStatusError(GenError):
    """Endpoint answered with a non-success status."""

    def __init__(self, status_code: int, body: str = ""):
        super().__init__(f"endpoint returned status {status_code}")
        self.status_code = status_code
        self.body = body


class ParseError(GenError):
    """Response text did not match the expected grammar."""

    def __init__(self, message: str, span: str = ""):
        super().__init__(message if not span else f"{message}: {span!r}")
        self.span = span


def load_template(template_id: str) -> str:
    if template_id not in TEMPLATES:
        raise GenConfigError(f"unknown template id {template_id!r}")
    name, _ = TEMPLATES[template_id]
    return resources.files("zoomcot.prompts").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class GenRequest:
    """One completion request: a filled template plus ordered image payloads."""

    template_id: str
    text: str
    images: tuple[bytes, ...] = ()
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if self.template_id not in TEMPLATES:
            raise GenConfigError(f"unknown template id {self.template_id!r}")
        arity = TEMPLATES[self.template_id][1]
        if len(self.images) != arity:
            raise GenConfigError(
                f"template {self.template_id!r} expects {arity} image(s), "
                f"got {len(self.images)}"
            )


@dataclass(frozen=True)
class TripletResponse:
    """Parsed description / area-of-interest / reasoning triple."""

    description: str
    aoi: BoxRatio
    reasoning: str
    repaired: bool = False


@dataclass(frozen=True)
class QAResponse:
    """Parsed generated QA: question, answers, and the target ratio box."""

    question: str
    short_answer: str
    long_answer: str
    target_box: BoxRatio
    repaired: bool = False


class GeneratorClient(Protocol):
    def complete(self, request: GenRequest) -> str: ...


@dataclass
class EndpointConfig:
    """Connection settings for a chat-style completion endpoint."""

    base_url: str
    model: str
    credential_env: str = "ZOOMCOT_API_KEY"
    timeout_s: float = 60.0
    retries: int = 2
    retry_wait_s: float = 0.5


class EndpointClient:
    """Minimal chat-completions client with image attachments and retries.

    Shareable across workers; every call is independent. The credential is
    read from the environment, never from configuration files.
    """

    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._client = httpx.Client(
            timeout=config.timeout_s,
            transport=transport,
        )

    def _credential(self) -> str:
        value = os.environ.get(self.config.credential_env, "")
        if not value:
            raise GenConfigError(
                f"credential env var {self.config.credential_env!r} is not set"
            )
        return value

    def _payload(self, request: GenRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.text}]
        for img in request.images:
            b64 = base64.b64encode(img).decode("ascii")
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}
            )
        return {
            "model": self.config.model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [{"role": "user", "content": content}],
        }

    def complete(self, request: GenRequest) -> str:
        key = self._credential()  # fail before any network activity
        payload = self._payload(request)
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        attempts = 1 + max(0, self.config.retries)
        last_error: GenError | None = None
        for attempt in range(attempts):
            try:
                resp = self._client.post(
                    url, json=payload, headers={"Authorization": f"Bearer {key}"}
                )
            except httpx.TimeoutException as exc:
                last_error = GenTimeoutError(str(exc))
            except httpx.HTTPError as exc:
                last_error = GenTransportError(str(exc))
            else:
                if resp.status_code != 200:
                    last_error = GenStatusError(resp.status_code, resp.text[:500])
                    if 400 <= resp.status_code < 500 and resp.status_code != 429:
                        break  # non-retryable
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (KeyError, IndexError, ValueError) as exc:
                        raise ParseError(f"malformed endpoint response: {exc}")
            if attempt + 1 < attempts:
                time.sleep(self.config.retry_wait_s)
        assert last_error is not None
        raise last_error


_BOX_VECTOR = re.compile(
    r"\[\s*([-+0-9.eE]+)\s*[,;\s]\s*([-+0-9.eE]+)\s*[,;\s]\s*([-+0-9.eE]+)\s*[,;\s]\s*([-+0-9.eE]+)\s*\]"
)


def _extract_section(raw: str, header: str, all_headers) -> str:
    """Text between ``header:`` and the next known header (or end of text)."""
    pattern = re.compile(rf"^\s*{re.escape(header)}\s*:\s*", re.IGNORECASE | re.MULTILINE)
    m = pattern.search(raw)
    if m is None:
        raise ParseError(f"missing section {header!r}", raw[:120])
    start = m.end()
    end = len(raw)
    for other in all_headers:
        om = re.compile(
            rf"^\s*{re.escape(other)}\s*:\s*", re.IGNORECASE | re.MULTILINE
        ).search(raw, start)
        if om is not None:
            end = min(end, om.start())
    return raw[start:end].strip()


def _parse_box_section(section: str, header: str) -> tuple[BoxRatio, bool]:
    m = _BOX_VECTOR.search(section)
    if m is None:
        raise ParseError(f"no box vector under {header!r}", section[:120])
    values = m.groups()
    try:
        floats = [float(v) for v in values]
    except ValueError:
        raise ParseError(f"non-numeric box under {header!r}", m.group(0))
    repaired = floats[0] > floats[2] or floats[1] > floats[3]
    repaired = repaired or any(v < 0 or v > 1 for v in floats)
    box = normalize_box_units(floats)
    if box is None:
        raise ParseError(f"unusable box under {header!r}", m.group(0))
    return box, repaired


TRIPLET_HEADERS = ("Scene Description", "Area of Interest", "Reasoning")


def parse_triplet(raw: str) -> TripletResponse:
    """Parse the Scene Description / Area of Interest / Reasoning format.

    The box tolerates whitespace and separator variations; inverted or
    out-of-range coordinates are repaired (swap / clamp) and flagged.
    """
    description = _extract_section(raw, "Scene Description", TRIPLET_HEADERS)
    aoi_text = _extract_section(raw, "Area of Interest", TRIPLET_HEADERS)
    reasoning = _extract_section(raw, "Reasoning", TRIPLET_HEADERS)
    box, repaired = _parse_box_section(aoi_text, "Area of Interest")
    return TripletResponse(description, box, reasoning, repaired)


def render_triplet(t: TripletResponse) -> str:
    """Inverse of parse_triplet for well-formed triplets (used by the oracle)."""
    b = t.aoi
    return (
        f"Scene Description:\n{t.description}\n\n"
        f"Area of Interest:\n[{b.x1}, {b.y1}, {b.x2}, {b.y2}]\n\n"
        f"Reasoning:\n{t.reasoning}\n"
    )


QA_HEADERS = ("Question", "Short Answer", "Long Answer", "Target Box")


def parse_qa(raw: str) -> QAResponse:
    """Parse a generated QA block: question, both answers, and the target box."""
    question = _extract_section(raw, "Question", QA_HEADERS)
    short_answer = _extract_section(raw, "Short Answer", QA_HEADERS)
    long_answer = _extract_section(raw, "Long Answer", QA_HEADERS)
    box_text = _extract_section(raw, "Target Box", QA_HEADERS)
    box, repaired = _parse_box_section(box_text, "Target Box")
    return QAResponse(question, short_answer, long_answer, box, repaired)


def render_qa(q: QAResponse) -> str:
    b = q.target_box
    return (
        f"Question:\n{q.question}\n\n"
        f"Short Answer:\n{q.short_answer}\n\n"
        f"Long Answer:\n{q.long_answer}\n\n"
        f"Target Box:\n[{b.x1}, {b.y1}, {b.x2}, {b.y2}]\n"
    )


_TRIPLET_TEMPLATES = {"triplet_full_image", "round_3d"}


@dataclass
class ScriptedOracle:
    """Deterministic GeneratorClient double.

    Triplet-producing templates replay ``script`` in order and repeat the
    last entry once exhausted; every other template returns its canned text.
    Entries may be TripletResponse objects (rendered through the real wire
    format) or raw strings (useful for malformed-response fixtures).
    """

    script: list
    qa: QAResponse | None = None
    justification: str = "The target object is clearly visible in this view."
    distill_text: str = "The target sits at the highlighted location."
    judge_text: str = "score: 1.00"
    calls: list = field(default_factory=list)
    _cursor: int = 0

    def __post_init__(self):
        if not self.script:
            raise ValueError("scripted oracle needs a nonempty script")
        self._lock = threading.Lock()

    def complete(self, request: GenRequest) -> str:
        self.calls.append(request.template_id)
        if request.template_id in _TRIPLET_TEMPLATES:
            with self._lock:
                entry = self.script[min(self._cursor, len(self.script) - 1)]
                self._cursor += 1
            return entry if isinstance(entry, str) else render_triplet(entry)
        if request.template_id == "qa_3d":
            if self.qa is None:
                raise GenConfigError("oracle has no scripted QA response")
            return render_qa(self.qa)
        if request.template_id == "distill":
            return self.distill_text
        if request.template_id == "judge":
            return self.judge_text
        return self.justification
