from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

from tamperscope.imagetools import ImageBuffer
from tamperscope.messages import BoundingBox, BoxHypothesis, ReasoningMessage
from tamperscope.rulebase import load_rule_set

REPO_ROOT = Path(__file__).parent.parent
SCHEMA_DIR = REPO_ROOT / "schemas"
SYNTHETIC_DATASET = REPO_ROOT / "data" / "synthetic"


@pytest.fixture(scope="session")
def rule_set():
    return load_rule_set(REPO_ROOT / "src" / "tamperscope" / "rules" / "ors_reconstructed.json")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def gradient_image():
    """64x48 image whose pixel values encode their own coordinates."""
    return make_gradient_image(64, 48)


def make_gradient_image(width: int, height: int) -> ImageBuffer:
    xx, yy = np.meshgrid(np.arange(width), np.arange(height))
    pixels = np.stack(
        [xx % 256, yy % 256, (xx * 7 + yy * 13) % 256], axis=2
    ).astype(np.uint8)
    return ImageBuffer.from_array(pixels)


def make_message(
    step: int = 0,
    boxes: list[tuple[int, int, int, int]] = (),
    confidences: list[float] | None = None,
    label: str | None = None,
    analysis: str = "test analysis",
) -> ReasoningMessage:
    confidences = confidences or [0.8] * len(boxes)
    hyps = tuple(
        BoxHypothesis(BoundingBox(*b), c, f"note {i}")
        for i, (b, c) in enumerate(zip(boxes, confidences))
    )
    return ReasoningMessage(step=step, boxes=hyps, analysis=analysis, label=label)


def message_json(
    boxes: list[dict] | None = None,
    analysis: str = "looks edited near the flagged area",
    label: str | None = None,
    extra: dict | None = None,
) -> str:
    doc: dict = {"boxes": boxes if boxes is not None else [], "analysis": analysis}
    if label is not None:
        doc["label"] = label
    if extra:
        doc.update(extra)
    return json.dumps(doc)


def load_schema(name: str) -> dict:
    return json.loads((SCHEMA_DIR / name).read_text(encoding="utf-8"))
