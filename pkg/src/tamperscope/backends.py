"""Model-service contracts and wire-protocol clients.

Three services back the pipeline: a multimodal chat model, an embedding
model, and a promptable segmenter.  All travel over HTTP+JSON with images
as base64 PNG.  Every call is recorded into the run trace with a request
digest, latency, and retry count; transport and timeout failures are
retried with exponential backoff, protocol and model-refusal failures
never are.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import requests

from .imagetools import MaskImage, binarize_mask, decode_image_png
from .messages import BoundingBox, clamp_box
from .trace import Trace

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"

KIND_TRANSPORT = "transport"
KIND_PROTOCOL = "protocol"
KIND_REFUSAL = "model-refusal"
KIND_TIMEOUT = "timeout"

_RETRYABLE_KINDS = frozenset({KIND_TRANSPORT, KIND_TIMEOUT})


class BackendError(Exception):
    """Backend failure; kind determines whether a retry is allowed."""

    def __init__(self, kind: str, detail: str):
        if kind not in (KIND_TRANSPORT, KIND_PROTOCOL, KIND_REFUSAL, KIND_TIMEOUT):
            raise ValueError(f"unknown backend error kind {kind!r}")
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail

    @property
    def retryable(self) -> bool:
        return self.kind in _RETRYABLE_KINDS


# ---------------------------------------------------------------------------
# Wire types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChatTurn:
    """One conversation turn; images are PNG payloads."""

    role: str
    text: str
    images: tuple[bytes, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in (ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == ROLE_ASSISTANT and self.images:
            raise ValueError("assistant turns carry no images")
        if not self.text and not self.images:
            raise ValueError("turn needs text or images")


@dataclass(frozen=True)
class DecodingParams:
    """Chat decoding controls; the pipeline is a deterministic forensic
    procedure, so defaults are temperature 0 with a fixed seed."""

    temperature: float = 0.0
    max_tokens: int = 1024
    seed: Optional[int] = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")


@dataclass(frozen=True)
class EmbeddingVector:
    """Fixed-length real vector tagged with the producing model."""

    values: tuple[float, ...]
    model_id: str

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("embedding vector is empty")
        if not all(np.isfinite(v) for v in self.values):
            raise ValueError("embedding vector has non-finite values")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.array))


@dataclass(frozen=True)
class SegmentPrompt:
    """Box prompts in absolute pixel coordinates of the target image."""

    boxes: tuple[BoundingBox, ...]

    def __post_init__(self) -> None:
        if not self.boxes:
            raise ValueError("segment prompt needs at least one box")

    def validate_bounds(self, dims: tuple[int, int]) -> None:
        for box in self.boxes:
            if clamp_box(box, dims) != box:
                raise BackendError(
                    KIND_PROTOCOL,
                    f"segment box {box.as_tuple()} outside image bounds {dims}",
                )


# ---------------------------------------------------------------------------
# Contracts
# ---------------------------------------------------------------------------

class ChatBackend(Protocol):
    def chat(
        self,
        history: Sequence[ChatTurn],
        decoding: DecodingParams = DecodingParams(),
        trace: Optional[Trace] = None,
    ) -> str: ...


class EmbeddingBackend(Protocol):
    def embed_image(self, image: bytes, trace: Optional[Trace] = None) -> EmbeddingVector: ...

    def embed_text(self, text: str, trace: Optional[Trace] = None) -> EmbeddingVector: ...


class SegmentationBackend(Protocol):
    def segment(
        self, image: bytes, prompt: SegmentPrompt, trace: Optional[Trace] = None
    ) -> MaskImage: ...


@dataclass
class BackendSet:
    """The three service clients a pipeline run needs."""

    chat: ChatBackend
    embed: EmbeddingBackend
    segment: SegmentationBackend


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def history_digest(history: Sequence[ChatTurn], decoding: DecodingParams) -> str:
    """Stable digest of a chat request; image payloads enter by content hash."""
    doc = {
        "turns": [
            {
                "role": t.role,
                "text": t.text,
                "images": [hashlib.sha256(img).hexdigest() for img in t.images],
            }
            for t in history
        ],
        "temperature": decoding.temperature,
        "max_tokens": decoding.max_tokens,
        "seed": decoding.seed,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def payload_digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def record_backend_call(
    trace: Optional[Trace],
    backend: str,
    digest: str,
    started: float,
    retries: int,
    ok: bool,
    error: Optional[str] = None,
) -> None:
    if trace is None:
        return
    data = {
        "backend": backend,
        "digest": digest,
        "latency": trace.now() - started,
        "retries": retries,
        "ok": ok,
    }
    if error:
        data["error"] = error
    trace.record("backend_call", **data)


def validate_chat_history(history: Sequence[ChatTurn]) -> None:
    if not history:
        raise BackendError(KIND_PROTOCOL, "chat history is empty")
    if history[-1].role != ROLE_USER:
        raise BackendError(KIND_PROTOCOL, "last chat turn must be a user turn")


@dataclass
class RetryPolicy:
    """Bounded retry with exponential backoff for retryable error kinds."""

    attempts: int = 3
    base_delay: float = 0.25
    multiplier: float = 2.0
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)


def call_with_retries(fn: Callable[[], object], policy: RetryPolicy) -> tuple[object, int]:
    """Run fn up to policy.attempts times; returns (result, retries used).

    Protocol and model-refusal errors are never retried; the exhausted
    budget surfaces the last error.
    """
    last: Optional[BackendError] = None
    for attempt in range(policy.attempts):
        try:
            return fn(), attempt
        except BackendError as exc:
            if not exc.retryable:
                raise
            last = exc
            if attempt + 1 < policy.attempts:
                policy.sleep(policy.base_delay * (policy.multiplier**attempt))
    assert last is not None
    raise last


def normalize_embedding(values: Sequence[float], model_id: str) -> EmbeddingVector:
    """Unit-normalize at the backend boundary so cosine reduces to a dot."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise BackendError(KIND_PROTOCOL, "embedding response is not a flat vector")
    if not np.all(np.isfinite(arr)):
        raise BackendError(KIND_PROTOCOL, "embedding response has non-finite values")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise BackendError(KIND_PROTOCOL, "embedding response is the zero vector")
    return EmbeddingVector(values=tuple(float(v) for v in arr / norm), model_id=model_id)


# ---------------------------------------------------------------------------
# HTTP clients
# ---------------------------------------------------------------------------

def _b64(payload: bytes) -> str:
    return base64.b64encode(payload).decode("ascii")


class _HttpClient:
    def __init__(
        self,
        base_url: str,
        timeout: float = 60.0,
        retry: Optional[RetryPolicy] = None,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retry = retry or RetryPolicy()
        self._session = session or requests.Session()

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.base_url}{path}"
        try:
            resp = self._session.post(url, json=body, timeout=self.timeout)
        except requests.Timeout as exc:
            raise BackendError(KIND_TIMEOUT, f"{url}: {exc}") from exc
        except requests.RequestException as exc:
            raise BackendError(KIND_TRANSPORT, f"{url}: {exc}") from exc
        if resp.status_code >= 500:
            raise BackendError(KIND_TRANSPORT, f"{url}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(
                KIND_PROTOCOL, f"{url}: HTTP {resp.status_code}: {resp.text[:200]}"
            )
        try:
            doc = resp.json()
        except ValueError as exc:
            raise BackendError(KIND_PROTOCOL, f"{url}: non-JSON response") from exc
        if not isinstance(doc, dict):
            raise BackendError(KIND_PROTOCOL, f"{url}: response is not an object")
        return doc


class HttpChatBackend(_HttpClient):
    """POST /chat client for the multimodal chat service."""

    def chat(
        self,
        history: Sequence[ChatTurn],
        decoding: DecodingParams = DecodingParams(),
        trace: Optional[Trace] = None,
    ) -> str:
        validate_chat_history(history)
        digest = history_digest(history, decoding)
        body = {
            "messages": [
                {"role": t.role, "text": t.text, "images": [_b64(i) for i in t.images]}
                for t in history
            ],
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_tokens,
        }
        if decoding.seed is not None:
            body["seed"] = decoding.seed

        started = trace.now() if trace else 0.0
        try:
            doc, retries = call_with_retries(lambda: self._post("/chat", body), self.retry)
        except BackendError as exc:
            record_backend_call(trace, "chat", digest, started, self.retry.attempts - 1, False, str(exc))
            raise
        text = doc.get("text")  # type: ignore[union-attr]
        if not isinstance(text, str):
            record_backend_call(trace, "chat", digest, started, retries, False, "missing text")
            raise BackendError(KIND_PROTOCOL, "chat response missing string field 'text'")
        if not text.strip():
            record_backend_call(trace, "chat", digest, started, retries, False, "empty text")
            raise BackendError(KIND_REFUSAL, "chat service returned empty text")
        record_backend_call(trace, "chat", digest, started, retries, True)
        return text


class HttpEmbeddingBackend(_HttpClient):
    """POST /embed/image and /embed/text client."""

    def _embed(self, path: str, body: dict, digest: str, trace: Optional[Trace]) -> EmbeddingVector:
        started = trace.now() if trace else 0.0
        try:
            doc, retries = call_with_retries(lambda: self._post(path, body), self.retry)
        except BackendError as exc:
            record_backend_call(trace, f"embed{path.replace('/embed', '')}", digest, started, self.retry.attempts - 1, False, str(exc))
            raise
        values = doc.get("values")  # type: ignore[union-attr]
        model_id = doc.get("model_id")  # type: ignore[union-attr]
        if not isinstance(values, list) or not isinstance(model_id, str):
            record_backend_call(trace, f"embed{path.replace('/embed', '')}", digest, started, retries, False, "bad fields")
            raise BackendError(KIND_PROTOCOL, "embed response needs 'values' array and 'model_id'")
        vector = normalize_embedding(values, model_id)
        record_backend_call(trace, f"embed{path.replace('/embed', '')}", digest, started, retries, True)
        return vector

    def embed_image(self, image: bytes, trace: Optional[Trace] = None) -> EmbeddingVector:
        decode_image_png(image)  # fail fast on undecodable payloads
        return self._embed("/embed/image", {"image": _b64(image)}, payload_digest(image), trace)

    def embed_text(self, text: str, trace: Optional[Trace] = None) -> EmbeddingVector:
        if not text:
            raise BackendError(KIND_PROTOCOL, "cannot embed empty text")
        return self._embed("/embed/text", {"text": text}, text_digest(text), trace)


class HttpSegmentationBackend(_HttpClient):
    """POST /segment client for the promptable segmenter."""

    def segment(
        self, image: bytes, prompt: SegmentPrompt, trace: Optional[Trace] = None
    ) -> MaskImage:
        target = decode_image_png(image)
        prompt.validate_bounds(target.dims)
        digest = payload_digest(
            image + json.dumps([b.as_tuple() for b in prompt.boxes]).encode("ascii")
        )
        body = {
            "image": _b64(image),
            "boxes": [list(b.as_tuple()) for b in prompt.boxes],
        }
        started = trace.now() if trace else 0.0
        try:
            doc, retries = call_with_retries(lambda: self._post("/segment", body), self.retry)
        except BackendError as exc:
            record_backend_call(trace, "segment", digest, started, self.retry.attempts - 1, False, str(exc))
            raise
        mask_b64 = doc.get("mask")  # type: ignore[union-attr]
        if not isinstance(mask_b64, str):
            record_backend_call(trace, "segment", digest, started, retries, False, "missing mask")
            raise BackendError(KIND_PROTOCOL, "segment response missing string field 'mask'")
        try:
            mask = binarize_mask(base64.b64decode(mask_b64))
        except Exception as exc:
            record_backend_call(trace, "segment", digest, started, retries, False, "bad mask")
            raise BackendError(KIND_PROTOCOL, f"segment mask undecodable: {exc}") from exc
        if mask.dims != target.dims:
            record_backend_call(trace, "segment", digest, started, retries, False, "dims mismatch")
            raise BackendError(
                KIND_PROTOCOL,
                f"segment mask dims {mask.dims} do not match image dims {target.dims}",
            )
        record_backend_call(trace, "segment", digest, started, retries, True)
        return mask


def http_backend_set(
    chat_url: str,
    embed_url: str,
    segment_url: str,
    timeout: float = 60.0,
    retry: Optional[RetryPolicy] = None,
) -> BackendSet:
    return BackendSet(
        chat=HttpChatBackend(chat_url, timeout, retry),
        embed=HttpEmbeddingBackend(embed_url, timeout, retry),
        segment=HttpSegmentationBackend(segment_url, timeout, retry),
    )
