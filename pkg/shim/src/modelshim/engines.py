"""Embedding and segmentation engines behind the wire protocol.

Every engine reports the configured identifier verbatim as model_id and
is guarded for single-inference-at-a-time unless the runtime says
otherwise.  Embeddings are unit-normalized here, at the service boundary.
"""

from __future__ import annotations

import hashlib
import threading

import numpy as np
from PIL import Image


class EngineError(RuntimeError):
    """Engine cannot be constructed or cannot serve this request."""


# ---------------------------------------------------------------------------
# Embedding engines
# ---------------------------------------------------------------------------

def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise EngineError("embedding collapsed to the zero vector")
    return vec / norm


class HashEmbedding:
    """Digest-seeded unit vectors; deterministic per input, no weights.

    Image inputs hash the decoded RGB pixels, so any losslessly re-encoded
    copy of the same image embeds identically.
    """

    def __init__(self, model_id: str, dim: int):
        if dim < 2:
            raise EngineError(f"embedding dim must be >= 2, got {dim}")
        self.model_id = model_id
        self.dim = dim

    def _vector(self, key: bytes) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(key).digest()[:8], "big")
        return _unit(np.random.default_rng(seed).standard_normal(self.dim))

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector(b"text:" + text.encode("utf-8"))

    def embed_image(self, image: Image.Image) -> np.ndarray:
        rgb = image.convert("RGB")
        header = f"image:{rgb.width}x{rgb.height}:".encode("ascii")
        return self._vector(header + rgb.tobytes())


class ClipEmbedding:
    """CLIP-class joint text/image embedding via transformers (weights must
    be available locally; nothing is downloaded here)."""

    def __init__(self, model_id: str, hf_id: str, device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EngineError(f"clip engine needs torch+transformers: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(hf_id).to(device).eval()
            self._processor = CLIPProcessor.from_pretrained(hf_id)
        except Exception as exc:
            raise EngineError(f"cannot load CLIP weights {hf_id!r}: {exc}") from exc
        self.model_id = model_id
        self.dim = int(self._model.config.projection_dim)
        self._device = device
        self._lock = threading.Lock()

    def embed_text(self, text: str) -> np.ndarray:
        import torch

        with self._lock, torch.no_grad():
            inputs = self._processor(
                text=[text], return_tensors="pt", padding=True, truncation=True
            ).to(self._device)
            features = self._model.get_text_features(**inputs)
        return _unit(features[0].cpu().numpy().astype(np.float64))

    def embed_image(self, image: Image.Image) -> np.ndarray:
        import torch

        with self._lock, torch.no_grad():
            inputs = self._processor(images=image.convert("RGB"), return_tensors="pt").to(
                self._device
            )
            features = self._model.get_image_features(**inputs)
        return _unit(features[0].cpu().numpy().astype(np.float64))


def build_embedding_engine(identifier: str, device: str = "cpu"):
    scheme, _, arg = identifier.partition(":")
    if scheme == "hash":
        return HashEmbedding(identifier, int(arg or "512"))
    if scheme == "clip":
        if not arg:
            raise EngineError("clip engine needs a model id, e.g. clip:openai/clip-vit-base-patch32")
        return ClipEmbedding(identifier, arg, device)
    raise EngineError(f"unknown embedding engine {identifier!r}")


# ---------------------------------------------------------------------------
# Segmentation engines
# ---------------------------------------------------------------------------

class BoxFillSegmenter:
    """Mask = union of the prompt boxes; the degenerate reference engine."""

    def __init__(self, model_id: str):
        self.model_id = model_id

    def segment(self, image: Image.Image, boxes: list[tuple[int, int, int, int]]) -> np.ndarray:
        width, height = image.size
        mask = np.zeros((height, width), dtype=np.uint8)
        for x1, y1, x2, y2 in boxes:
            mask[y1:y2, x1:x2] = 255
        return mask


class GrabCutSegmenter:
    """Classical box-prompted segmentation (GrabCut), one pass per box.

    Deterministic for a fixed iteration count; falls back to filling a box
    when the optimizer cannot separate foreground from background.
    """

    def __init__(self, model_id: str, iterations: int = 5):
        try:
            import cv2  # noqa: F401
        except ImportError as exc:
            raise EngineError(f"grabcut engine needs opencv: {exc}") from exc
        self.model_id = model_id
        self.iterations = iterations
        self._lock = threading.Lock()

    def _one_box(self, bgr: np.ndarray, box: tuple[int, int, int, int]) -> np.ndarray:
        import cv2

        height, width = bgr.shape[:2]
        x1, y1, x2, y2 = box
        mask = np.zeros((height, width), dtype=np.uint8)
        rect = (x1, y1, x2 - x1, y2 - y1)
        if rect[2] < 2 or rect[3] < 2 or (rect[2] >= width and rect[3] >= height):
            mask[y1:y2, x1:x2] = 1
            return mask
        bgd = np.zeros((1, 65), dtype=np.float64)
        fgd = np.zeros((1, 65), dtype=np.float64)
        try:
            cv2.grabCut(bgr, mask, rect, bgd, fgd, self.iterations, cv2.GC_INIT_WITH_RECT)
        except cv2.error:
            mask[:] = 0
            mask[y1:y2, x1:x2] = 1
            return mask
        return ((mask == 1) | (mask == 3)).astype(np.uint8)

    def segment(self, image: Image.Image, boxes: list[tuple[int, int, int, int]]) -> np.ndarray:
        rgb = np.asarray(image.convert("RGB"))
        bgr = rgb[:, :, ::-1].copy()
        with self._lock:
            combined = np.zeros(bgr.shape[:2], dtype=np.uint8)
            for box in boxes:
                combined |= self._one_box(bgr, box)
        return combined * np.uint8(255)


class SamSegmenter:
    """SAM-class promptable segmenter via transformers (local weights only)."""

    def __init__(self, model_id: str, hf_id: str, device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from transformers import SamModel, SamProcessor
        except ImportError as exc:
            raise EngineError(f"sam engine needs torch+transformers: {exc}") from exc
        try:
            self._model = SamModel.from_pretrained(hf_id).to(device).eval()
            self._processor = SamProcessor.from_pretrained(hf_id)
        except Exception as exc:
            raise EngineError(f"cannot load SAM weights {hf_id!r}: {exc}") from exc
        self.model_id = model_id
        self._device = device
        self._lock = threading.Lock()

    def segment(self, image: Image.Image, boxes: list[tuple[int, int, int, int]]) -> np.ndarray:
        import torch

        rgb = image.convert("RGB")
        with self._lock, torch.no_grad():
            inputs = self._processor(
                rgb, input_boxes=[[list(b) for b in boxes]], return_tensors="pt"
            ).to(self._device)
            outputs = self._model(**inputs, multimask_output=False)
            masks = self._processor.image_processor.post_process_masks(
                outputs.pred_masks.cpu(),
                inputs["original_sizes"].cpu(),
                inputs["reshaped_input_sizes"].cpu(),
            )[0]
        combined = masks.any(dim=0).squeeze(0).numpy().astype(np.uint8)
        return combined * np.uint8(255)


def build_segmentation_engine(identifier: str, device: str = "cpu"):
    scheme, _, arg = identifier.partition(":")
    if scheme == "boxfill":
        return BoxFillSegmenter(identifier)
    if scheme == "grabcut":
        return GrabCutSegmenter(identifier, int(arg or "5"))
    if scheme == "sam":
        if not arg:
            raise EngineError("sam engine needs a model id, e.g. sam:facebook/sam-vit-base")
        return SamSegmenter(identifier, arg, device)
    raise EngineError(f"unknown segmentation engine {identifier!r}")


def unit_norm_ok(values: np.ndarray, tol: float = 1e-6) -> bool:
    return abs(float(np.linalg.norm(values)) - 1.0) <= tol
