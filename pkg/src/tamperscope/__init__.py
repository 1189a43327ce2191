"""tamperscope: training-free image manipulation localization.

A per-image run filters a forensic rule base by embedding similarity,
drives a multimodal chat model through a coarse-to-fine reasoning loop
with a crop tool, and converts the final bounding boxes into a pixel-level
mask via a promptable segmenter.  An evaluation harness computes the
standard pixel- and image-level metrics.
"""

from .backends import (
    BackendError,
    BackendSet,
    ChatTurn,
    DecodingParams,
    EmbeddingVector,
    SegmentPrompt,
    http_backend_set,
)
from .chain import (
    ChainConfig,
    ChainError,
    ChainState,
    ForensicResult,
    finalize,
    has_stabilized,
    init_step,
    run_chain,
    update_step,
)
from .evaluation import (
    EvalSample,
    Report,
    ScoredPrediction,
    evaluate_dataset,
    image_f1,
    pixel_ap,
    pixel_auc,
    pixel_f1,
    result_to_prediction,
)
from .imagetools import (
    ImageBuffer,
    MaskImage,
    binarize_mask,
    crop,
    pad_box,
    union_masks,
)
from .messages import (
    BoundingBox,
    BoxHypothesis,
    ParseReport,
    ReasoningMessage,
    bbox_iou,
    clamp_box,
    parse_reasoning_message,
    serialize_reasoning_message,
)
from .rulebase import (
    RelevanceThreshold,
    Rule,
    RuleSet,
    cosine_similarity,
    filter_relevant_rules,
    load_rule_set,
    render_rules_prompt,
)
from .stubs import stub_backend_set
from .trace import Trace

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BackendSet",
    "BoundingBox",
    "BoxHypothesis",
    "ChainConfig",
    "ChainError",
    "ChainState",
    "ChatTurn",
    "DecodingParams",
    "EmbeddingVector",
    "EvalSample",
    "ForensicResult",
    "ImageBuffer",
    "MaskImage",
    "ParseReport",
    "ReasoningMessage",
    "RelevanceThreshold",
    "Report",
    "Rule",
    "RuleSet",
    "ScoredPrediction",
    "SegmentPrompt",
    "Trace",
    "bbox_iou",
    "binarize_mask",
    "clamp_box",
    "cosine_similarity",
    "crop",
    "evaluate_dataset",
    "filter_relevant_rules",
    "finalize",
    "has_stabilized",
    "http_backend_set",
    "image_f1",
    "init_step",
    "load_rule_set",
    "pad_box",
    "parse_reasoning_message",
    "pixel_ap",
    "pixel_auc",
    "pixel_f1",
    "render_rules_prompt",
    "result_to_prediction",
    "run_chain",
    "serialize_reasoning_message",
    "stub_backend_set",
    "union_masks",
    "update_step",
]
