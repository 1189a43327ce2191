"""Shim configuration: listen address, engine identifiers, upstream chat.

Engine identifiers use a scheme prefix so deployments choose their
backing model without code changes:

  embedding:     hash:<dim>            deterministic digest-seeded vectors
                 clip:<hf-model-id>    CLIP-class model via transformers
  segmentation:  boxfill               mask = union of the prompt boxes
                 grabcut[:<iters>]     classical box-prompted segmentation
                 sam:<hf-model-id>     SAM-class model via transformers

Model weights for clip:/sam: engines must already be available locally;
this service never downloads them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

DEFAULT_EMBEDDING_MODEL = "hash:512"
DEFAULT_SEGMENTATION_MODEL = "grabcut:5"


@dataclass
class ShimConfig:
    host: str = "127.0.0.1"
    port: int = 8008
    embedding_model: str = DEFAULT_EMBEDDING_MODEL
    segmentation_model: str = DEFAULT_SEGMENTATION_MODEL
    chat_upstream: Optional[str] = None  # pass-through /chat target URL
    chat_timeout: float = 120.0
    device: str = "cpu"

    @classmethod
    def from_env(cls, **overrides) -> "ShimConfig":
        values = dict(
            host=os.environ.get("MODELSHIM_HOST", "127.0.0.1"),
            port=int(os.environ.get("MODELSHIM_PORT", "8008")),
            embedding_model=os.environ.get("MODELSHIM_EMBED_MODEL", DEFAULT_EMBEDDING_MODEL),
            segmentation_model=os.environ.get(
                "MODELSHIM_SEGMENT_MODEL", DEFAULT_SEGMENTATION_MODEL
            ),
            chat_upstream=os.environ.get("MODELSHIM_CHAT_UPSTREAM") or None,
            chat_timeout=float(os.environ.get("MODELSHIM_CHAT_TIMEOUT", "120")),
            device=os.environ.get("MODELSHIM_DEVICE", "cpu"),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)
