"""Structured reasoning-message protocol: bounding-box geometry, robust
parsing of model output, and canonical serialization.

Boxes use absolute pixel coordinates of the target image, origin top-left,
half-open convention [x1, x2) x [y1, y2).  The parser applies a bounded,
auditable repair ladder: strip code fences, extract the first balanced
object, tolerate trailing commas, fill missing confidence with 0.5.
Anything deeper fails rather than guessing.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

MAX_BOXES_PER_MESSAGE = 8
DEFAULT_CONFIDENCE = 0.5

LABEL_AUTHENTIC = "authentic"
LABEL_TAMPERED = "tampered"
VALID_LABELS = (LABEL_AUTHENTIC, LABEL_TAMPERED)


class MessageError(ValueError):
    """Raised when a reasoning message violates its invariants."""


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    """Half-open integer pixel box [x1, x2) x [y1, y2), origin top-left."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not isinstance(v, int):
                raise MessageError(f"box coordinates must be int, got {v!r}")
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise MessageError(
                f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2}): "
                "requires x1 < x2 and y1 < y2"
            )

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


def clamp_box(box: BoundingBox, dims: tuple[int, int]) -> Optional[BoundingBox]:
    """Clip a box to [0, width] x [0, height]; None if nothing remains.

    Idempotent: clamping a clamped box is a no-op.
    """
    width, height = dims
    x1 = max(0, min(box.x1, width))
    y1 = max(0, min(box.y1, height))
    x2 = max(0, min(box.x2, width))
    y2 = max(0, min(box.y2, height))
    if x1 >= x2 or y1 >= y2:
        return None
    return BoundingBox(x1, y1, x2, y2)


def bbox_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two half-open integer boxes, in [0, 1].

    Exact integer areas; matches a rasterize-and-count oracle.
    """
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = max(0, ix2 - ix1)
    ih = max(0, iy2 - iy1)
    inter = iw * ih
    if inter == 0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union


# ---------------------------------------------------------------------------
# Message types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxHypothesis:
    """One suspected region: the box, the model's confidence, and its note."""

    box: BoundingBox
    confidence: float
    note: str

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise MessageError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class ReasoningMessage:
    """Structured per-step model output: boxes, analysis, optional label.

    Invariants: a tampered label implies at least one box; an authentic
    label implies zero boxes.  The final step of a chain must carry a label.
    """

    step: int
    boxes: tuple[BoxHypothesis, ...]
    analysis: str
    label: Optional[str] = None

    def __post_init__(self) -> None:
        if self.step < 0:
            raise MessageError(f"step must be non-negative, got {self.step}")
        if self.label is not None and self.label not in VALID_LABELS:
            raise MessageError(f"unknown label {self.label!r}")
        if self.label == LABEL_TAMPERED and not self.boxes:
            raise MessageError("tampered label requires at least one box")
        if self.label == LABEL_AUTHENTIC and self.boxes:
            raise MessageError("authentic label requires zero boxes")

    @property
    def box_list(self) -> list[BoundingBox]:
        return [h.box for h in self.boxes]


@dataclass
class ParseReport:
    """Outcome of one parse attempt plus the repairs that fired."""

    outcome: str  # "clean" | "repaired" | "failed"
    repairs: list[str] = field(default_factory=list)
    detail: str = ""


# ---------------------------------------------------------------------------
# Extraction ladder
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)\s*```", re.DOTALL | re.IGNORECASE)
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")


def _first_balanced_object(text: str) -> Optional[str]:
    """Return the first balanced {...} span, tracking JSON string state."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start : i + 1]
        start = text.find("{", start + 1)
    return None


def _try_loads(candidate: str, repairs: list[str]) -> tuple[Optional[dict], list[str]]:
    """json.loads with one trailing-comma retry; returns (obj, repairs used)."""
    try:
        obj = json.loads(candidate)
        return (obj if isinstance(obj, dict) else None), repairs
    except json.JSONDecodeError:
        pass
    stripped = _TRAILING_COMMA_RE.sub(r"\1", candidate)
    if stripped != candidate:
        try:
            obj = json.loads(stripped)
            if isinstance(obj, dict):
                return obj, repairs + ["removed trailing commas"]
        except json.JSONDecodeError:
            pass
    return None, repairs


def _extract_object(raw: str) -> tuple[Optional[dict], list[str]]:
    """Run the extraction ladder; first success wins."""
    obj, repairs = _try_loads(raw.strip(), [])
    if obj is not None:
        return obj, repairs

    fence = _FENCE_RE.search(raw)
    if fence:
        obj, repairs = _try_loads(fence.group(1), ["stripped code fence"])
        if obj is not None:
            return obj, repairs

    span = _first_balanced_object(raw)
    if span is not None and span.strip() != raw.strip():
        obj, repairs = _try_loads(span, ["extracted embedded JSON object"])
        if obj is not None:
            return obj, repairs
    return None, []


# ---------------------------------------------------------------------------
# Parsing and serialization
# ---------------------------------------------------------------------------

def _coerce_int(value: object) -> Optional[int]:
    # JSON does not distinguish 10 from 10.0; integral floats are accepted,
    # fractional coordinates are not a repairable condition.
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value == int(value):
        return int(value)
    return None


def _parse_boxes(
    raw_boxes: object, dims: tuple[int, int], repairs: list[str]
) -> Optional[list[BoxHypothesis]]:
    """Validate, clamp, and cap the box list; None on schema violation."""
    if not isinstance(raw_boxes, list):
        return None
    hypotheses: list[BoxHypothesis] = []
    for idx, entry in enumerate(raw_boxes):
        if not isinstance(entry, dict):
            return None
        coords = entry.get("box")
        if not isinstance(coords, list) or len(coords) != 4:
            return None
        ints = [_coerce_int(c) for c in coords]
        if any(c is None for c in ints):
            return None
        x1, y1, x2, y2 = ints  # type: ignore[misc]
        if x1 >= x2 or y1 >= y2:
            repairs.append(f"dropped zero-area box {idx}: {coords}")
            continue
        clamped = clamp_box(BoundingBox(x1, y1, x2, y2), dims)
        if clamped is None:
            repairs.append(f"dropped out-of-bounds box {idx}: {coords}")
            continue
        if clamped.as_tuple() != (x1, y1, x2, y2):
            repairs.append(f"clamped box {idx} to image bounds")

        if "confidence" in entry:
            conf = entry["confidence"]
            if isinstance(conf, bool) or not isinstance(conf, (int, float)):
                return None
            conf = float(conf)
            if not (0.0 <= conf <= 1.0):
                return None
        else:
            conf = DEFAULT_CONFIDENCE
            repairs.append(f"filled missing confidence for box {idx} with 0.5")

        note = entry.get("note")
        if not isinstance(note, str):
            return None
        hypotheses.append(BoxHypothesis(clamped, conf, note))

    if len(hypotheses) > MAX_BOXES_PER_MESSAGE:
        # Keep the highest-confidence boxes; ties break by earlier position.
        ranked = sorted(
            range(len(hypotheses)), key=lambda i: (-hypotheses[i].confidence, i)
        )
        keep = sorted(ranked[:MAX_BOXES_PER_MESSAGE])
        repairs.append(
            f"dropped {len(hypotheses) - MAX_BOXES_PER_MESSAGE} excess boxes "
            f"beyond the {MAX_BOXES_PER_MESSAGE} highest-confidence"
        )
        hypotheses = [hypotheses[i] for i in keep]
    return hypotheses


def parse_reasoning_message(
    raw: str, image_dims: tuple[int, int], step: int
) -> tuple[Optional[ReasoningMessage], ParseReport]:
    """Parse raw model text into a ReasoningMessage.

    Returns (message, report).  On a failed outcome the message is None and
    report.detail says why.  Every message emitted with outcome != failed
    satisfies the ReasoningMessage invariants.
    """
    if not raw or not raw.strip():
        return None, ParseReport("failed", detail="empty model output")

    obj, repairs = _extract_object(raw)
    if obj is None:
        return None, ParseReport("failed", detail="no parseable JSON object found")

    if "boxes" not in obj:
        return None, ParseReport("failed", repairs, "missing mandatory field 'boxes'")
    analysis = obj.get("analysis")
    if not isinstance(analysis, str):
        return None, ParseReport("failed", repairs, "missing mandatory field 'analysis'")

    label = obj.get("label")
    if label is not None and label not in VALID_LABELS:
        return None, ParseReport("failed", repairs, f"unknown label {label!r}")

    hypotheses = _parse_boxes(obj["boxes"], image_dims, repairs)
    if hypotheses is None:
        return None, ParseReport("failed", repairs, "malformed box entry")

    try:
        message = ReasoningMessage(
            step=step, boxes=tuple(hypotheses), analysis=analysis, label=label
        )
    except MessageError as exc:
        return None, ParseReport("failed", repairs, str(exc))

    outcome = "repaired" if repairs else "clean"
    return message, ParseReport(outcome, repairs)


def serialize_reasoning_message(msg: ReasoningMessage) -> str:
    """Canonical JSON for a message: sorted keys, compact separators.

    parse_reasoning_message(serialize(m), dims, m.step) round-trips to m,
    and structurally equal messages serialize to identical bytes.
    """
    obj: dict = {
        "step": msg.step,
        "boxes": [
            {"box": list(h.box.as_tuple()), "confidence": h.confidence, "note": h.note}
            for h in msg.boxes
        ],
        "analysis": msg.analysis,
    }
    if msg.label is not None:
        obj["label"] = msg.label
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
