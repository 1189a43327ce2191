"""Multi-step progressive reasoning orchestrator.

One run per image: filter the rule base to relevant cues, issue a coarse
high-recall proposal, refine hypotheses over up to n update steps with
early stop once the boxes stabilize, then hand the final boxes to the
promptable segmenter for the pixel-level mask.  With deterministic stub
backends the whole result, trace included, is a pure function of inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backends import (
    BackendError,
    BackendSet,
    ChatTurn,
    DecodingParams,
    EmbeddingVector,
    SegmentPrompt,
)
from .imagetools import ImageBuffer, MaskImage, crop, encode_image_png, pad_box
from .messages import (
    LABEL_AUTHENTIC,
    LABEL_TAMPERED,
    BoundingBox,
    BoxHypothesis,
    ReasoningMessage,
    bbox_iou,
    parse_reasoning_message,
    serialize_reasoning_message,
)
from .prompts import (
    DEFAULT_TEMPLATE_ID,
    PromptTemplates,
    load_templates,
    render_coarse,
    render_consolidate,
    render_refine,
)
from .rulebase import (
    DEFAULT_FALLBACK_TOP_K,
    RelevanceThreshold,
    Rule,
    RuleSet,
    filter_with_scores,
    render_rules_prompt,
    rule_embeddings_for,
)
from .trace import Trace

DEFAULT_QUERY = (
    "Determine whether this photograph has been manipulated and localize "
    "any tampered regions."
)


class ChainError(Exception):
    """Unrecoverable stage failure; carries the partial trace."""

    def __init__(
        self,
        stage: str,
        detail: str,
        trace: Optional[Trace] = None,
        cause: Optional[BaseException] = None,
        raw_text: Optional[str] = None,
    ):
        super().__init__(f"{stage}: {detail}")
        self.stage = stage
        self.detail = detail
        self.trace = trace
        self.cause = cause
        self.raw_text = raw_text

    @property
    def backend_kind(self) -> Optional[str]:
        return self.cause.kind if isinstance(self.cause, BackendError) else None


@dataclass
class ChainConfig:
    """Orchestrator knobs; n=2 is the default accuracy/latency trade-off."""

    n: int = 2
    stabilization_iou: float = 0.9
    max_boxes_stage1: int = 8
    relevance_threshold: RelevanceThreshold = field(default_factory=RelevanceThreshold)
    prompt_template_id: str = DEFAULT_TEMPLATE_ID
    fallback_top_k: int = DEFAULT_FALLBACK_TOP_K
    crop_margin: float = 0.1
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not (0.0 < self.stabilization_iou <= 1.0):
            raise ValueError(f"stabilization_iou must be in (0, 1], got {self.stabilization_iou}")
        if self.max_boxes_stage1 < 1:
            raise ValueError("max_boxes_stage1 must be >= 1")


@dataclass
class ChainState:
    """Trajectory of one reasoning chain: messages R_0..R_i and views V_0..V_i."""

    query: str
    target: ImageBuffer
    rules: list[Rule]
    messages: list[ReasoningMessage] = field(default_factory=list)
    views: list[list[ImageBuffer]] = field(default_factory=list)
    trace: Trace = field(default_factory=Trace.deterministic)
    target_png: bytes = b""
    finalize_early: bool = False

    @property
    def step(self) -> int:
        return len(self.messages) - 1

    @property
    def last_message(self) -> ReasoningMessage:
        return self.messages[-1]


@dataclass
class ForensicResult:
    """Final verdict: label, optional pixel mask, boxes, explanation, trace."""

    label: str
    mask: Optional[MaskImage]
    final_boxes: list[BoundingBox]
    explanation: str
    trace: Trace

    def __post_init__(self) -> None:
        if self.label == LABEL_TAMPERED:
            if self.mask is None or self.mask.is_empty:
                raise ValueError("tampered result requires a non-empty mask")
        elif self.label == LABEL_AUTHENTIC:
            if self.mask is not None and not self.mask.is_empty:
                raise ValueError("authentic result cannot carry a non-empty mask")
        else:
            raise ValueError(f"unknown label {self.label!r}")

    def to_dict(self, mask_path: Optional[str] = None) -> dict:
        return {
            "label": self.label,
            "boxes": [list(b.as_tuple()) for b in self.final_boxes],
            "explanation": self.explanation,
            "mask_path": mask_path,
        }


# ---------------------------------------------------------------------------
# Step helpers
# ---------------------------------------------------------------------------

def _ranked_boxes(message: ReasoningMessage, limit: int) -> list[BoxHypothesis]:
    """Highest-confidence hypotheses first; ties keep earlier list position."""
    ranked = sorted(range(len(message.boxes)), key=lambda i: (-message.boxes[i].confidence, i))
    return [message.boxes[i] for i in ranked[:limit]]


def _crop_views(
    state: ChainState, hypotheses: list[BoxHypothesis], margin: float
) -> list[ImageBuffer]:
    views = []
    for hyp in hypotheses:
        padded = pad_box(hyp.box, state.target.dims, margin)
        views.append(crop(state.target, padded))
    return views


def _chat_and_parse(
    state: ChainState,
    stage: str,
    prompt: str,
    images: list[bytes],
    step: int,
    config: ChainConfig,
    backends: BackendSet,
) -> ReasoningMessage:
    history = [ChatTurn(role="user", text=prompt, images=tuple(images))]
    try:
        reply = backends.chat.chat(history, config.decoding, state.trace)
    except BackendError as exc:
        raise ChainError(stage, f"chat backend failed: {exc}", state.trace, cause=exc) from exc
    message, report = parse_reasoning_message(reply, state.target.dims, step)
    state.trace.record(
        "parse", stage=stage, step=step, outcome=report.outcome, repairs=report.repairs
    )
    if message is None:
        raise ChainError(
            stage,
            f"unparseable reasoning message: {report.detail}",
            state.trace,
            raw_text=reply,
        )
    return message


def _record_step(state: ChainState, stage: str, message: ReasoningMessage, n_views: int) -> None:
    state.trace.record(
        "step",
        stage=stage,
        step=message.step,
        boxes=[list(h.box.as_tuple()) for h in message.boxes],
        confidences=[h.confidence for h in message.boxes],
        label=message.label,
        views=n_views,
    )


def init_step(
    query: str,
    target: ImageBuffer,
    rules: list[Rule],
    config: ChainConfig,
    backends: BackendSet,
    trace: Optional[Trace] = None,
    templates: Optional[PromptTemplates] = None,
) -> ChainState:
    """Coarse proposal pass: one chat call, parse R_0, crop views V_0."""
    if not rules:
        raise ValueError("init_step requires a non-empty rule list")
    templates = templates or load_templates(config.prompt_template_id)
    state = ChainState(
        query=query,
        target=target,
        rules=list(rules),
        trace=trace if trace is not None else Trace.deterministic(),
        target_png=encode_image_png(target),
    )
    prompt = render_coarse(templates, query, render_rules_prompt(rules), target.dims)
    message = _chat_and_parse(
        state, "init", prompt, [state.target_png], step=0, config=config, backends=backends
    )
    kept = _ranked_boxes(message, config.max_boxes_stage1)
    views = _crop_views(state, kept, config.crop_margin)
    state.messages.append(message)
    state.views.append(views)
    _record_step(state, "init", message, len(views))
    if message.label == LABEL_AUTHENTIC and not message.boxes:
        state.finalize_early = True
        state.trace.record("decision", what="authentic short-circuit", step=message.step)
    return state


def update_step(
    state: ChainState,
    config: ChainConfig,
    backends: BackendSet,
    templates: Optional[PromptTemplates] = None,
) -> ChainState:
    """One refinement pass: feed R_{i-1}, V_{i-1}, rules, and the target back."""
    if state.finalize_early:
        raise ValueError("chain already finalized; no further updates")
    if state.step >= config.n:
        raise ValueError(f"step budget n={config.n} exhausted")
    templates = templates or load_templates(config.prompt_template_id)
    prev = state.last_message
    step = prev.step + 1
    prompt = render_refine(
        templates,
        render_rules_prompt(state.rules),
        serialize_reasoning_message(prev),
        prev.step,
        step,
        state.target.dims,
    )
    images = [encode_image_png(v) for v in state.views[-1]] + [state.target_png]
    message = _chat_and_parse(state, "update", prompt, images, step, config, backends)
    views = _crop_views(state, list(message.boxes), config.crop_margin)
    state.messages.append(message)
    state.views.append(views)
    _record_step(state, "update", message, len(views))
    if message.label == LABEL_AUTHENTIC and not message.boxes:
        state.finalize_early = True
        state.trace.record("decision", what="authentic short-circuit", step=message.step)
    return state


def has_stabilized(prev: ReasoningMessage, curr: ReasoningMessage, tau: float) -> bool:
    """True iff equal box counts and greedy highest-IoU pairing >= tau throughout."""
    if not prev.boxes or not curr.boxes:
        raise ValueError("stabilization test requires at least one box on each side")
    if len(prev.boxes) != len(curr.boxes):
        return False
    pairs = sorted(
        (
            (-bbox_iou(a.box, b.box), i, j)
            for i, a in enumerate(prev.boxes)
            for j, b in enumerate(curr.boxes)
        )
    )
    used_prev: set[int] = set()
    used_curr: set[int] = set()
    matched = 0
    for neg_iou, i, j in pairs:
        if i in used_prev or j in used_curr:
            continue
        if -neg_iou < tau:
            return False
        used_prev.add(i)
        used_curr.add(j)
        matched += 1
    return matched == len(prev.boxes)


def finalize(
    state: ChainState,
    config: ChainConfig,
    backends: BackendSet,
    templates: Optional[PromptTemplates] = None,
) -> ForensicResult:
    """Resolve the label (one consolidation call if absent) and segment."""
    templates = templates or load_templates(config.prompt_template_id)
    final = state.last_message
    if final.label is None:
        prompt = render_consolidate(
            templates,
            render_rules_prompt(state.rules),
            serialize_reasoning_message(final),
            final.step,
            state.target.dims,
        )
        images = [encode_image_png(v) for v in state.views[-1]] + [state.target_png]
        message = _chat_and_parse(
            state, "consolidate", prompt, images, final.step + 1, config, backends
        )
        state.messages.append(message)
        state.views.append(_crop_views(state, list(message.boxes), config.crop_margin))
        _record_step(state, "consolidate", message, len(state.views[-1]))
        final = message
        if final.label is None:
            raise ChainError(
                "consolidate", "no image-level label after consolidation retry", state.trace
            )

    explanation = "\n\n".join(
        f"[step {m.step}] {m.analysis}" for m in state.messages if m.analysis
    )

    if final.label == LABEL_AUTHENTIC:
        state.trace.record("finalize", label=final.label, boxes=0)
        return ForensicResult(
            label=LABEL_AUTHENTIC,
            mask=None,
            final_boxes=[],
            explanation=explanation,
            trace=state.trace,
        )

    boxes = final.box_list
    prompt = SegmentPrompt(boxes=tuple(boxes))
    try:
        mask = backends.segment.segment(state.target_png, prompt, state.trace)
    except BackendError as exc:
        raise ChainError("segment", f"segmentation failed: {exc}", state.trace, cause=exc) from exc
    if mask.is_empty:
        # Promptable segmenters can return nothing for a valid box; the box
        # itself is then the best available localization.
        bits = np.zeros((state.target.height, state.target.width), dtype=np.uint8)
        for box in boxes:
            bits[box.y1 : box.y2, box.x1 : box.x2] = 1
        mask = MaskImage(state.target.width, state.target.height, bits)
        state.trace.record("decision", what="empty segmentation mask; filled final boxes")
    state.trace.record("finalize", label=final.label, boxes=len(boxes))
    return ForensicResult(
        label=LABEL_TAMPERED,
        mask=mask,
        final_boxes=boxes,
        explanation=explanation,
        trace=state.trace,
    )


# ---------------------------------------------------------------------------
# Whole-chain driver
# ---------------------------------------------------------------------------

class _TracedEmbedder:
    """Binds the run trace onto the embedding backend for rule embedding."""

    def __init__(self, embed_backend, trace: Trace):
        self._backend = embed_backend
        self._trace = trace

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._backend.embed_text(text, self._trace)


def run_chain(
    query: str,
    target: ImageBuffer,
    rule_set: RuleSet,
    config: ChainConfig,
    backends: BackendSet,
    *,
    image_embedding_fn: Optional[Callable[[ImageBuffer], EmbeddingVector]] = None,
    rule_embeddings: Optional[dict[str, np.ndarray]] = None,
    rule_cache_path: Optional[str] = None,
    trace: Optional[Trace] = None,
) -> ForensicResult:
    """Filter rules, run Init plus up to n updates with early stop, segment.

    Total chat calls <= n + 2 (init, n updates, optional consolidation).
    """
    trace = trace if trace is not None else Trace.wall_clock()
    templates = load_templates(config.prompt_template_id)
    target_png = encode_image_png(target)

    try:
        if image_embedding_fn is not None:
            image_embedding = image_embedding_fn(target)
        else:
            image_embedding = backends.embed.embed_image(target_png, trace)
        if rule_embeddings is None:
            rule_embeddings = rule_embeddings_for(
                rule_set, _TracedEmbedder(backends.embed, trace), rule_cache_path
            )
    except BackendError as exc:
        raise ChainError("embed", f"embedding backend failed: {exc}", trace, cause=exc) from exc

    filtered = filter_with_scores(
        image_embedding.array,
        rule_embeddings,
        rule_set,
        config.relevance_threshold,
        config.fallback_top_k,
    )
    trace.record(
        "rule_filter",
        kept=[rule.id for rule in filtered.rules],
        fallback=filtered.fallback,
        threshold=config.relevance_threshold.t,
    )

    state = init_step(query, target, filtered.rules, config, backends, trace, templates)
    while not state.finalize_early and state.step < config.n:
        prev = state.last_message
        update_step(state, config, backends, templates)
        curr = state.last_message
        if state.finalize_early:
            break
        if prev.boxes and curr.boxes and has_stabilized(prev, curr, config.stabilization_iou):
            trace.record(
                "decision",
                what="early stop: boxes stabilized",
                step=curr.step,
                tau=config.stabilization_iou,
            )
            break
    return finalize(state, config, backends, templates)
