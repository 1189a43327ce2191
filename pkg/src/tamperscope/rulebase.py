"""Forensic rule base: load and validate the objectified rule set, embed
rules once per version, and filter per image by embedding similarity.

Filtering keeps exactly the rules whose cosine similarity with the image
embedding strictly exceeds the relevance threshold, sorted descending; when
nothing clears the threshold it falls back to the top-k most similar rules
so downstream reasoning always has cues.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

DEFAULT_RELEVANCE_THRESHOLD = 0.2
DEFAULT_FALLBACK_TOP_K = 5

MAX_RULE_TEXT_LENGTH = 512


class RuleSetError(Exception):
    """Base error for rule-set loading and filtering."""


class RuleParseError(RuleSetError):
    """Rule-set file is malformed (not valid JSON / wrong structure)."""


class RuleValidationError(RuleSetError):
    """Rule-set content violates an invariant; names the offending rule."""


@dataclass(frozen=True)
class Rule:
    """One objectified forensic cue sentence with category metadata."""

    id: str
    category: str
    text: str
    severity_hint: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.text:
            raise RuleValidationError(f"rule {self.id!r}: text is empty")
        if len(self.text) > MAX_RULE_TEXT_LENGTH:
            raise RuleValidationError(
                f"rule {self.id!r}: text exceeds {MAX_RULE_TEXT_LENGTH} characters"
            )
        if self.severity_hint is not None and self.severity_hint not in (1, 2, 3):
            raise RuleValidationError(
                f"rule {self.id!r}: severity_hint must be 1-3, got {self.severity_hint}"
            )


@dataclass(frozen=True)
class RuleSet:
    """Ordered, validated collection of rules with declared categories."""

    rules: tuple[Rule, ...]
    categories: tuple[str, ...]
    version: str

    def __post_init__(self) -> None:
        if not self.categories:
            raise RuleValidationError("rule set declares no categories")
        if not self.rules:
            raise RuleValidationError("rule set contains no rules")
        seen: set[str] = set()
        for rule in self.rules:
            if rule.id in seen:
                raise RuleValidationError(f"duplicate rule id {rule.id!r}")
            seen.add(rule.id)
            if rule.category not in self.categories:
                raise RuleValidationError(
                    f"rule {rule.id!r}: unknown category {rule.category!r}"
                )
        populated = {rule.category for rule in self.rules}
        for category in self.categories:
            if category not in populated:
                raise RuleValidationError(f"category {category!r} has no rules")

    def __len__(self) -> int:
        return len(self.rules)

    def by_id(self, rule_id: str) -> Rule:
        for rule in self.rules:
            if rule.id == rule_id:
                return rule
        raise KeyError(rule_id)


@dataclass(frozen=True)
class RelevanceThreshold:
    """Cosine-similarity cutoff t; rules with similarity > t are kept."""

    t: float = DEFAULT_RELEVANCE_THRESHOLD

    def __post_init__(self) -> None:
        if not (-1.0 <= self.t <= 1.0):
            raise RuleValidationError(f"threshold {self.t} outside [-1, 1]")


def load_rule_set(path: str | Path) -> RuleSet:
    """Load and validate a rule-set JSON file.

    The documented format: top-level ``version`` (string), ``categories``
    (array of strings), ``rules`` (array of objects with ``id``,
    ``category``, ``text``, optional ``severity_hint``).
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RuleParseError(f"cannot read rule set {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise RuleParseError(f"rule set {path} is not valid JSON: {exc}") from exc

    if not isinstance(doc, dict):
        raise RuleParseError(f"rule set {path}: top level must be an object")
    version = doc.get("version")
    categories = doc.get("categories")
    rules_raw = doc.get("rules")
    if not isinstance(version, str):
        raise RuleParseError(f"rule set {path}: missing string field 'version'")
    if not isinstance(categories, list) or not all(isinstance(c, str) for c in categories):
        raise RuleParseError(f"rule set {path}: 'categories' must be an array of strings")
    if not isinstance(rules_raw, list):
        raise RuleParseError(f"rule set {path}: 'rules' must be an array")

    rules: list[Rule] = []
    for i, entry in enumerate(rules_raw):
        if not isinstance(entry, dict):
            raise RuleParseError(f"rule set {path}: rule #{i} is not an object")
        rule_id = entry.get("id")
        category = entry.get("category")
        text = entry.get("text")
        if not isinstance(rule_id, str) or not isinstance(category, str) or not isinstance(text, str):
            raise RuleParseError(
                f"rule set {path}: rule #{i} ({entry.get('id', '?')!r}) needs "
                "string fields id, category, text"
            )
        severity = entry.get("severity_hint")
        if severity is not None and not isinstance(severity, int):
            raise RuleValidationError(
                f"rule {rule_id!r}: severity_hint must be an integer"
            )
        rules.append(Rule(id=rule_id, category=category, text=text, severity_hint=severity))

    return RuleSet(rules=tuple(rules), categories=tuple(categories), version=version)


# ---------------------------------------------------------------------------
# Similarity and filtering
# ---------------------------------------------------------------------------

def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """dot(a, b) / (|a| |b|), in [-1, 1] up to floating error."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.ndim != 1 or vb.ndim != 1 or va.shape != vb.shape:
        raise RuleSetError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise RuleSetError("cosine similarity undefined for zero-norm input")
    return float(np.dot(va, vb) / (norm_a * norm_b))


@dataclass
class FilterResult:
    """Kept rules with their similarities, plus whether the fallback fired."""

    kept: list[tuple[Rule, float]]
    scores: dict[str, float] = field(default_factory=dict)
    fallback: bool = False

    @property
    def rules(self) -> list[Rule]:
        return [rule for rule, _ in self.kept]


def score_rules(
    image_embedding: Sequence[float] | np.ndarray,
    rule_embeddings: Mapping[str, Sequence[float] | np.ndarray],
    rules: RuleSet,
) -> list[tuple[Rule, float]]:
    """Similarity of every rule to the image, sorted descending (ties by id)."""
    scored: list[tuple[Rule, float]] = []
    for rule in rules.rules:
        if rule.id not in rule_embeddings:
            raise RuleSetError(f"missing embedding for rule {rule.id!r}")
        scored.append((rule, cosine_similarity(image_embedding, rule_embeddings[rule.id])))
    scored.sort(key=lambda item: (-item[1], item[0].id))
    return scored


def filter_with_scores(
    image_embedding: Sequence[float] | np.ndarray,
    rule_embeddings: Mapping[str, Sequence[float] | np.ndarray],
    rules: RuleSet,
    threshold: RelevanceThreshold = RelevanceThreshold(),
    fallback_top_k: int = DEFAULT_FALLBACK_TOP_K,
) -> FilterResult:
    """Keep rules with similarity strictly above t; fall back to top-k if none."""
    scored = score_rules(image_embedding, rule_embeddings, rules)
    kept = [(rule, sim) for rule, sim in scored if sim > threshold.t]
    fallback = False
    if not kept:
        kept = scored[:fallback_top_k]
        fallback = True
    return FilterResult(
        kept=kept,
        scores={rule.id: sim for rule, sim in scored},
        fallback=fallback,
    )


def filter_relevant_rules(
    image_embedding: Sequence[float] | np.ndarray,
    rule_embeddings: Mapping[str, Sequence[float] | np.ndarray],
    rules: RuleSet,
    threshold: RelevanceThreshold = RelevanceThreshold(),
    fallback_top_k: int = DEFAULT_FALLBACK_TOP_K,
) -> list[Rule]:
    """Rules relevant to this image, sorted descending by similarity."""
    return filter_with_scores(
        image_embedding, rule_embeddings, rules, threshold, fallback_top_k
    ).rules


def render_rules_prompt(rules: Sequence[Rule]) -> str:
    """Deterministic numbered text block, one line per rule with category tag."""
    if not rules:
        raise RuleSetError("cannot render an empty rule list")
    lines = [
        f"{i}. [{rule.category}] {rule.text}" for i, rule in enumerate(rules, start=1)
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Embedding cache sidecar
# ---------------------------------------------------------------------------

class _TextEmbedder(Protocol):
    def embed_text(self, text: str): ...  # returns an object with .values and .model_id


def load_embedding_cache(path: str | Path) -> Optional[dict]:
    """Read a sidecar cache; None when absent or unreadable."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    if not isinstance(doc, dict) or "model_id" not in doc or "embeddings" not in doc:
        return None
    return doc


def save_embedding_cache(
    path: str | Path, model_id: str, ruleset_version: str, embeddings: Mapping[str, Iterable[float]]
) -> None:
    doc = {
        "model_id": model_id,
        "ruleset_version": ruleset_version,
        "embeddings": {rid: [float(v) for v in vec] for rid, vec in embeddings.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def rule_embeddings_for(
    rules: RuleSet,
    embedder: _TextEmbedder,
    cache_path: Optional[str | Path] = None,
) -> dict[str, np.ndarray]:
    """Embeddings for every rule, via the sidecar cache when it matches.

    The cache is keyed by (rule id, embedding-model identifier) and the rule
    set version; a mismatch on either regenerates the whole sidecar.  Rules
    are static per version, images are not, so this is computed once.
    """
    cached = load_embedding_cache(cache_path) if cache_path else None
    probe = embedder.embed_text(rules.rules[0].text)
    model_id = probe.model_id
    if (
        cached
        and cached.get("model_id") == model_id
        and cached.get("ruleset_version") == rules.version
        and all(rule.id in cached["embeddings"] for rule in rules.rules)
    ):
        return {
            rule.id: np.asarray(cached["embeddings"][rule.id], dtype=np.float64)
            for rule in rules.rules
        }

    embeddings: dict[str, np.ndarray] = {
        rules.rules[0].id: np.asarray(probe.values, dtype=np.float64)
    }
    for rule in rules.rules[1:]:
        embeddings[rule.id] = np.asarray(embedder.embed_text(rule.text).values, dtype=np.float64)
    if cache_path:
        save_embedding_cache(cache_path, model_id, rules.version, embeddings)
    return embeddings


def decompose_seed_cue_prompt(seed_cue: str, category: str) -> str:
    """One-shot prompt template for decomposing a vague seed cue into
    objectified sub-rules in the documented format (authoring aid only)."""
    return (
        "You are helping curate a forensic rule base for image-manipulation "
        "inspection. Decompose the following vague seed cue into 3-5 precise, "
        "objectified single-sentence rules. Each rule must describe one "
        "concrete, visually checkable artifact, name the image property to "
        "inspect, and avoid hedging language.\n\n"
        f"Category: {category}\n"
        f"Seed cue: {seed_cue}\n\n"
        "Answer as a JSON array of objects with fields 'id', 'category', "
        "'text'. Keep each 'text' under 512 characters."
    )
