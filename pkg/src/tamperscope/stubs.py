"""Deterministic stub backends for tests and --stub runs.

Scripted stubs replay a fixed queue; procedural stubs derive output purely
from a content digest and seed.  Identical inputs yield identical outputs
across process runs, so whole pipeline results are reproducible without
any model service.
"""

from __future__ import annotations

import hashlib
import json
import threading
from typing import Optional, Sequence, Union

import numpy as np

from .backends import (
    KIND_PROTOCOL,
    BackendError,
    BackendSet,
    ChatTurn,
    DecodingParams,
    EmbeddingVector,
    SegmentPrompt,
    history_digest,
    normalize_embedding,
    payload_digest,
    record_backend_call,
    text_digest,
    validate_chat_history,
)
from .imagetools import MaskImage, decode_image_png
from .trace import Trace

ScriptEntry = Union[str, BackendError]


class ScriptedChatBackend:
    """Replays a queue of replies; entries may be BackendError to raise.

    The queue is access-serialized; call histories are kept for assertions.
    """

    def __init__(self, replies: Sequence[ScriptEntry]):
        self._replies = list(replies)
        self._lock = threading.Lock()
        self.calls: list[str] = []  # request digests, in call order

    def chat(
        self,
        history: Sequence[ChatTurn],
        decoding: DecodingParams = DecodingParams(),
        trace: Optional[Trace] = None,
    ) -> str:
        validate_chat_history(history)
        digest = history_digest(history, decoding)
        started = trace.now() if trace else 0.0
        with self._lock:
            self.calls.append(digest)
            if not self._replies:
                record_backend_call(trace, "chat", digest, started, 0, False, "script exhausted")
                raise BackendError(KIND_PROTOCOL, "chat script exhausted")
            entry = self._replies.pop(0)
        if isinstance(entry, BackendError):
            record_backend_call(trace, "chat", digest, started, 0, False, str(entry))
            raise entry
        record_backend_call(trace, "chat", digest, started, 0, True)
        return entry


class ProceduralChatBackend:
    """Chat reply as a pure function of (history digest, seed).

    Emits a valid reasoning-message JSON whose boxes lie inside the last
    attached image of the last user turn (the full target, by prompt
    convention).  Roughly three quarters of digests take the tampered
    branch so stub datasets exercise both labels.
    """

    def __init__(self, seed: int = 0, tampered_fraction: float = 0.75):
        self.seed = seed
        self.tampered_fraction = tampered_fraction

    def chat(
        self,
        history: Sequence[ChatTurn],
        decoding: DecodingParams = DecodingParams(),
        trace: Optional[Trace] = None,
    ) -> str:
        validate_chat_history(history)
        digest = history_digest(history, decoding)
        started = trace.now() if trace else 0.0

        target_payload = None
        for turn in reversed(history):
            if turn.role == "user" and turn.images:
                target_payload = turn.images[-1]
                break
        if target_payload is None:
            record_backend_call(trace, "chat", digest, started, 0, False, "no image")
            raise BackendError(KIND_PROTOCOL, "procedural chat stub needs an image turn")
        target = decode_image_png(target_payload)

        # Verdict is pinned to the target image so a chain keeps one label
        # across steps; box geometry still varies with the full history.
        label_seed = hashlib.sha256(target_payload + str(self.seed).encode("ascii")).digest()
        label_rng = np.random.default_rng(int.from_bytes(label_seed[:8], "big"))
        mixed = hashlib.sha256(f"{digest}:{self.seed}".encode("ascii")).digest()
        rng = np.random.default_rng(int.from_bytes(mixed[:8], "big"))
        width, height = target.dims

        if label_rng.random() >= self.tampered_fraction:
            reply = {
                "step": 0,
                "boxes": [],
                "analysis": "No rule-level inconsistencies located; exposure, noise grain, "
                "and boundary continuity look uniform across the frame.",
                "label": "authentic",
            }
        else:
            n_boxes = int(rng.integers(1, 4))
            boxes = []
            for i in range(n_boxes):
                bw = max(1, int(rng.integers(max(1, width // 8), max(2, width // 2))))
                bh = max(1, int(rng.integers(max(1, height // 8), max(2, height // 2))))
                x1 = int(rng.integers(0, max(1, width - bw)))
                y1 = int(rng.integers(0, max(1, height - bh)))
                boxes.append(
                    {
                        "box": [x1, y1, x1 + bw, y1 + bh],
                        "confidence": round(0.5 + 0.45 * float(rng.random()), 3),
                        "note": f"region {i + 1}: local statistics deviate from surroundings",
                    }
                )
            reply = {
                "step": 0,
                "boxes": boxes,
                "analysis": "Local noise and boundary statistics deviate inside the "
                "flagged regions relative to the rest of the frame.",
                "label": "tampered",
            }
        record_backend_call(trace, "chat", digest, started, 0, True)
        return json.dumps(reply, sort_keys=True)


class HashEmbeddingBackend:
    """Hash-seeded unit vectors; identical payloads embed identically."""

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        self.dim = dim
        self.model_id = f"stub-hash-{dim}"

    def _vector(self, key: str, digest: str, trace: Optional[Trace]) -> EmbeddingVector:
        started = trace.now() if trace else 0.0
        seed = int.from_bytes(hashlib.sha256(key.encode("ascii")).digest()[:8], "big")
        raw = np.random.default_rng(seed).standard_normal(self.dim)
        vector = normalize_embedding(raw, self.model_id)
        record_backend_call(trace, "embed", digest, started, 0, True)
        return vector

    def embed_image(self, image: bytes, trace: Optional[Trace] = None) -> EmbeddingVector:
        decode_image_png(image)
        digest = payload_digest(image)
        return self._vector(f"image:{digest}", digest, trace)

    def embed_text(self, text: str, trace: Optional[Trace] = None) -> EmbeddingVector:
        if not text:
            raise BackendError(KIND_PROTOCOL, "cannot embed empty text")
        digest = text_digest(text)
        return self._vector(f"text:{digest}", digest, trace)


class BoxFillSegmentationBackend:
    """Box-fill segmenter: the mask is exactly the union of the prompt boxes."""

    def __init__(self):
        self._lock = threading.Lock()
        self.call_count = 0

    def segment(
        self, image: bytes, prompt: SegmentPrompt, trace: Optional[Trace] = None
    ) -> MaskImage:
        target = decode_image_png(image)
        prompt.validate_bounds(target.dims)
        with self._lock:
            self.call_count += 1
        digest = payload_digest(
            image + json.dumps([b.as_tuple() for b in prompt.boxes]).encode("ascii")
        )
        started = trace.now() if trace else 0.0
        bits = np.zeros((target.height, target.width), dtype=np.uint8)
        for box in prompt.boxes:
            bits[box.y1 : box.y2, box.x1 : box.x2] = 1
        record_backend_call(trace, "segment", digest, started, 0, True)
        return MaskImage(target.width, target.height, bits)


def stub_backend_set(seed: int = 0, embed_dim: int = 64) -> BackendSet:
    """The deterministic backend trio used by --stub runs."""
    return BackendSet(
        chat=ProceduralChatBackend(seed=seed),
        embed=HashEmbeddingBackend(dim=embed_dim),
        segment=BoxFillSegmentationBackend(),
    )


def scripted_backend_set(
    replies: Sequence[ScriptEntry], embed_dim: int = 64
) -> BackendSet:
    """Scripted chat plus hash embeddings and box-fill segmentation."""
    return BackendSet(
        chat=ScriptedChatBackend(replies),
        embed=HashEmbeddingBackend(dim=embed_dim),
        segment=BoxFillSegmentationBackend(),
    )
