"""Visual tools: lossless crops, mask union/binarization, PNG codecs.

All pipeline-internal payloads are lossless PNG; JPEG is accepted on
ingestion only.  Crops never re-encode lossily because compression
artifacts are themselves forensic signals.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .messages import BoundingBox, clamp_box

DEFAULT_CROP_MARGIN = 0.1
DEFAULT_BINARIZE_THRESHOLD = 127


class ImageToolError(ValueError):
    """Raised for invalid image/mask payloads or rejected boxes."""


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major RGB8 image; pixels is an (height, width, 3) uint8 array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ImageToolError(f"dimensions must be >= 1, got {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width, 3):
            raise ImageToolError(
                f"pixel array shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x3"
            )
        if self.pixels.dtype != np.uint8:
            raise ImageToolError(f"pixels must be uint8, got {self.pixels.dtype}")

    @property
    def dims(self) -> tuple[int, int]:
        """(width, height)."""
        return (self.width, self.height)

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "ImageBuffer":
        arr = np.ascontiguousarray(pixels, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageToolError(f"expected (h, w, 3) array, got shape {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)


@dataclass(frozen=True)
class MaskImage:
    """Binary tampering mask; bits is an (height, width) uint8 array of 0/1."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ImageToolError(f"dimensions must be >= 1, got {self.width}x{self.height}")
        if self.bits.shape != (self.height, self.width):
            raise ImageToolError(
                f"mask shape {self.bits.shape} does not match {self.height}x{self.width}"
            )
        if self.bits.dtype != np.uint8:
            raise ImageToolError(f"mask bits must be uint8, got {self.bits.dtype}")
        if self.bits.max(initial=0) > 1:
            raise ImageToolError("mask values must be 0 or 1")

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def positive_count(self) -> int:
        return int(self.bits.sum())

    @property
    def is_empty(self) -> bool:
        return self.positive_count == 0

    @classmethod
    def zeros(cls, width: int, height: int) -> "MaskImage":
        return cls(width, height, np.zeros((height, width), dtype=np.uint8))

    @classmethod
    def from_array(cls, bits: np.ndarray) -> "MaskImage":
        arr = np.ascontiguousarray(bits, dtype=np.uint8)
        if arr.ndim != 2:
            raise ImageToolError(f"expected (h, w) array, got shape {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], bits=arr)


# ---------------------------------------------------------------------------
# Tool operations
# ---------------------------------------------------------------------------

def crop(image: ImageBuffer, box: BoundingBox) -> ImageBuffer:
    """Lossless crop: output pixel (i, j) equals input pixel (x1+i, y1+j)."""
    if clamp_box(box, image.dims) != box:
        raise ImageToolError(
            f"box {box.as_tuple()} not within image bounds {image.width}x{image.height}"
        )
    region = image.pixels[box.y1 : box.y2, box.x1 : box.x2].copy()
    return ImageBuffer(width=box.width, height=box.height, pixels=region)


def pad_box(
    box: BoundingBox, dims: tuple[int, int], margin: float = DEFAULT_CROP_MARGIN
) -> BoundingBox:
    """Expand a box by a context margin per side, clamped to image bounds.

    Forensic cues such as boundary inconsistencies live at region edges, so
    crops sent back to the chat model include surrounding context.  The
    unpadded box stays the box of record.
    """
    pad_x = int(round(box.width * margin))
    pad_y = int(round(box.height * margin))
    padded = clamp_box(
        BoundingBox(box.x1 - pad_x, box.y1 - pad_y, box.x2 + pad_x, box.y2 + pad_y),
        dims,
    )
    assert padded is not None  # a valid in-bounds box never pads to nothing
    return padded


def union_masks(masks: list[MaskImage]) -> MaskImage:
    """Pixelwise OR of equally sized masks; commutative, associative, idempotent."""
    if not masks:
        raise ImageToolError("union_masks requires a non-empty mask list")
    first = masks[0]
    combined = first.bits.copy()
    for mask in masks[1:]:
        if mask.dims != first.dims:
            raise ImageToolError(
                f"mask dimension mismatch: {mask.dims} vs {first.dims}"
            )
        np.bitwise_or(combined, mask.bits, out=combined)
    return MaskImage(first.width, first.height, combined)


def binarize_mask(payload: bytes, threshold: int = DEFAULT_BINARIZE_THRESHOLD) -> MaskImage:
    """Decode an 8-bit single-channel mask payload; bit = 1 iff gray > threshold."""
    if not (0 <= threshold <= 255):
        raise ImageToolError(f"threshold {threshold} outside [0, 255]")
    try:
        img = Image.open(io.BytesIO(payload))
        img.load()
    except Exception as exc:
        raise ImageToolError(f"undecodable mask payload: {exc}") from exc
    if img.mode == "1":
        img = img.convert("L")
    if img.mode != "L":
        raise ImageToolError(f"mask payload must be 8-bit single-channel, got mode {img.mode}")
    gray = np.asarray(img, dtype=np.uint8)
    return MaskImage.from_array((gray > threshold).astype(np.uint8))


# ---------------------------------------------------------------------------
# Codecs
# ---------------------------------------------------------------------------

def encode_image_png(image: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_image_png(payload: bytes) -> ImageBuffer:
    try:
        img = Image.open(io.BytesIO(payload))
        img.load()
    except Exception as exc:
        raise ImageToolError(f"undecodable image payload: {exc}") from exc
    return ImageBuffer.from_array(np.asarray(img.convert("RGB")))


def encode_mask_png(mask: MaskImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(mask.bits * np.uint8(255), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def load_image(path: str) -> ImageBuffer:
    """Read an image file (PNG or JPEG) into an RGB8 buffer."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ImageToolError(f"cannot read image {path!r}: {exc}") from exc
    return ImageBuffer.from_array(np.asarray(img.convert("RGB")))


def load_mask(path: str, threshold: int = DEFAULT_BINARIZE_THRESHOLD) -> MaskImage:
    """Read a ground-truth mask file, binarized at gray > threshold."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ImageToolError(f"cannot read mask {path!r}: {exc}") from exc
    gray = np.asarray(img.convert("L"), dtype=np.uint8)
    return MaskImage.from_array((gray > threshold).astype(np.uint8))


def render_overlay(image: ImageBuffer, mask: MaskImage, alpha: float = 0.5) -> ImageBuffer:
    """Side-by-side panel: input | mask | red alpha blend over tampered pixels."""
    if mask.dims != image.dims:
        raise ImageToolError(f"mask dims {mask.dims} do not match image dims {image.dims}")
    mask_rgb = np.repeat((mask.bits * np.uint8(255))[:, :, None], 3, axis=2)
    blend = image.pixels.astype(np.float32)
    tinted = blend.copy()
    tinted[:, :, 0] = (1 - alpha) * blend[:, :, 0] + alpha * 255.0
    tinted[:, :, 1] = (1 - alpha) * blend[:, :, 1]
    tinted[:, :, 2] = (1 - alpha) * blend[:, :, 2]
    selector = mask.bits.astype(bool)
    blend[selector] = tinted[selector]
    panel = np.concatenate([image.pixels, mask_rgb, blend.astype(np.uint8)], axis=1)
    return ImageBuffer.from_array(panel)
