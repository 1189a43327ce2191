"""FastAPI service implementing the pipeline wire protocol.

Endpoints: POST /chat (pass-through proxy to the configured upstream),
POST /embed/image, POST /embed/text, POST /segment, GET /healthz.
Error mapping: 400 malformed body, 422 out-of-bounds boxes, 502 upstream
chat failure, 503 while models are loading.
"""

from __future__ import annotations

import base64
import binascii
import io
from contextlib import asynccontextmanager
from typing import Optional

import numpy as np
import requests
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .config import ShimConfig
from .engines import build_embedding_engine, build_segmentation_engine


class ChatMessage(BaseModel):
    role: str
    text: str = ""
    images: list[str] = Field(default_factory=list)


class ChatRequest(BaseModel):
    messages: list[ChatMessage] = Field(min_length=1)
    temperature: float = Field(ge=0)
    max_tokens: int = Field(ge=1)
    seed: Optional[int] = None


class EmbedImageRequest(BaseModel):
    image: str


class EmbedTextRequest(BaseModel):
    text: str = Field(min_length=1)


class SegmentRequest(BaseModel):
    image: str
    boxes: list[list[int]] = Field(min_length=1)


def _decode_image(b64_payload: str) -> Image.Image:
    try:
        payload = base64.b64decode(b64_payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise _BadRequest(f"image field is not valid base64: {exc}") from exc
    try:
        img = Image.open(io.BytesIO(payload))
        img.load()
        return img
    except Exception as exc:
        raise _BadRequest(f"image payload is not decodable: {exc}") from exc


class _BadRequest(Exception):
    def __init__(self, detail: str):
        self.detail = detail


def _mask_png_b64(mask: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(mask.astype(np.uint8), mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(config: Optional[ShimConfig] = None) -> FastAPI:
    config = config or ShimConfig.from_env()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        app.state.embedder = build_embedding_engine(config.embedding_model, config.device)
        app.state.segmenter = build_segmentation_engine(
            config.segmentation_model, config.device
        )
        app.state.loaded = True
        yield

    app = FastAPI(title="modelshim", lifespan=lifespan)
    app.state.config = config
    app.state.loaded = False

    @app.exception_handler(RequestValidationError)
    async def validation_to_400(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.exception_handler(_BadRequest)
    async def bad_request_handler(request: Request, exc: _BadRequest):
        return JSONResponse(status_code=400, content={"detail": exc.detail})

    def _require_loaded() -> Optional[JSONResponse]:
        if not app.state.loaded:
            return JSONResponse(status_code=503, content={"detail": "models are loading"})
        return None

    @app.get("/healthz")
    async def healthz():
        return {
            "status": "ok" if app.state.loaded else "loading",
            "embedding_model": config.embedding_model,
            "segmentation_model": config.segmentation_model,
            "chat_upstream": config.chat_upstream,
        }

    @app.post("/chat")
    async def chat(body: ChatRequest):
        not_ready = _require_loaded()
        if not_ready:
            return not_ready
        if not config.chat_upstream:
            return JSONResponse(
                status_code=502, content={"detail": "no chat upstream configured"}
            )
        try:
            resp = requests.post(
                config.chat_upstream.rstrip("/") + "/chat",
                json=body.model_dump(exclude_none=True),
                timeout=config.chat_timeout,
            )
        except requests.RequestException as exc:
            return JSONResponse(status_code=502, content={"detail": f"upstream failed: {exc}"})
        if resp.status_code != 200:
            return JSONResponse(
                status_code=502,
                content={"detail": f"upstream returned HTTP {resp.status_code}"},
            )
        try:
            doc = resp.json()
            text = doc["text"]
        except (ValueError, KeyError):
            return JSONResponse(
                status_code=502, content={"detail": "upstream response missing 'text'"}
            )
        return {"text": text}

    @app.post("/embed/image")
    async def embed_image(body: EmbedImageRequest):
        not_ready = _require_loaded()
        if not_ready:
            return not_ready
        image = _decode_image(body.image)
        values = app.state.embedder.embed_image(image)
        return {"values": [float(v) for v in values], "model_id": app.state.embedder.model_id}

    @app.post("/embed/text")
    async def embed_text(body: EmbedTextRequest):
        not_ready = _require_loaded()
        if not_ready:
            return not_ready
        values = app.state.embedder.embed_text(body.text)
        return {"values": [float(v) for v in values], "model_id": app.state.embedder.model_id}

    @app.post("/segment")
    async def segment(body: SegmentRequest):
        not_ready = _require_loaded()
        if not_ready:
            return not_ready
        image = _decode_image(body.image)
        width, height = image.size
        boxes: list[tuple[int, int, int, int]] = []
        for raw in body.boxes:
            if len(raw) != 4:
                raise _BadRequest(f"box {raw} must have exactly four coordinates")
            x1, y1, x2, y2 = raw
            if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
                return JSONResponse(
                    status_code=422,
                    content={
                        "detail": f"box {raw} outside image bounds {width}x{height}"
                    },
                )
            boxes.append((x1, y1, x2, y2))
        mask = app.state.segmenter.segment(image, boxes)
        assert mask.shape == (height, width)
        return {"mask": _mask_png_b64(mask)}

    return app
