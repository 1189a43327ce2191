"""Pipeline configuration: TOML file, environment overrides, digests.

Secrets never live in the config file; backend URLs honor the
TAMPERSCOPE_CHAT_URL / TAMPERSCOPE_EMBED_URL / TAMPERSCOPE_SEGMENT_URL
environment variables so credentials embedded in endpoints stay out of
versioned configs.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - version shim
    import tomli as tomllib

from .backends import DecodingParams, RetryPolicy
from .chain import DEFAULT_QUERY, ChainConfig
from .rulebase import RelevanceThreshold


class ConfigError(ValueError):
    """Unreadable config file or invalid configuration values."""


def default_rule_set_path() -> str:
    return str(resources.files("tamperscope") / "rules" / "ors_reconstructed.json")


@dataclass
class PipelineConfig:
    """Everything a run needs: endpoints, chain knobs, paths, parallelism."""

    chat_url: str = "http://127.0.0.1:8008"
    embed_url: str = "http://127.0.0.1:8008"
    segment_url: str = "http://127.0.0.1:8008"
    timeout: float = 60.0
    retry_attempts: int = 3

    chain: ChainConfig = field(default_factory=ChainConfig)
    query: str = DEFAULT_QUERY

    rule_set_path: str = field(default_factory=default_rule_set_path)
    embedding_cache_path: Optional[str] = None  # None: output_dir/rule_embeddings.json

    output_dir: str = "tamperscope-out"
    parallel: int = 2
    stub: bool = False
    stub_seed: int = 0

    def __post_init__(self) -> None:
        if self.parallel < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallel}")
        if not Path(self.rule_set_path).exists():
            raise ConfigError(f"rule set path does not exist: {self.rule_set_path}")

    @property
    def retry(self) -> RetryPolicy:
        return RetryPolicy(attempts=self.retry_attempts)

    def cache_path(self) -> str:
        if self.embedding_cache_path:
            return self.embedding_cache_path
        return str(Path(self.output_dir) / "rule_embeddings.json")

    def digest(self) -> str:
        doc = {
            "chat_url": self.chat_url,
            "embed_url": self.embed_url,
            "segment_url": self.segment_url,
            "timeout": self.timeout,
            "retry_attempts": self.retry_attempts,
            "n": self.chain.n,
            "stabilization_iou": self.chain.stabilization_iou,
            "max_boxes_stage1": self.chain.max_boxes_stage1,
            "relevance_threshold": self.chain.relevance_threshold.t,
            "fallback_top_k": self.chain.fallback_top_k,
            "crop_margin": self.chain.crop_margin,
            "prompt_template_id": self.chain.prompt_template_id,
            "temperature": self.chain.decoding.temperature,
            "max_tokens": self.chain.decoding.max_tokens,
            "seed": self.chain.decoding.seed,
            "query": self.query,
            "rule_set_path": os.path.basename(self.rule_set_path),
            "stub": self.stub,
            "stub_seed": self.stub_seed,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return value


def load_pipeline_config(path: Optional[str] = None) -> PipelineConfig:
    """Build a PipelineConfig from an optional TOML file plus env overrides."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc

    backends = _section(doc, "backends")
    chain_doc = _section(doc, "chain")
    rules_doc = _section(doc, "rules")
    run_doc = _section(doc, "run")

    try:
        chain = ChainConfig(
            n=int(chain_doc.get("steps", 2)),
            stabilization_iou=float(chain_doc.get("stabilization_iou", 0.9)),
            max_boxes_stage1=int(chain_doc.get("max_boxes_stage1", 8)),
            relevance_threshold=RelevanceThreshold(
                t=float(chain_doc.get("relevance_threshold", 0.2))
            ),
            prompt_template_id=str(chain_doc.get("prompt_template", "default-v1")),
            fallback_top_k=int(chain_doc.get("fallback_top_k", 5)),
            crop_margin=float(chain_doc.get("crop_margin", 0.1)),
            decoding=DecodingParams(
                temperature=float(chain_doc.get("temperature", 0.0)),
                max_tokens=int(chain_doc.get("max_tokens", 1024)),
                seed=int(chain_doc["seed"]) if "seed" in chain_doc else 0,
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid chain configuration: {exc}") from exc

    rule_path = rules_doc.get("path") or default_rule_set_path()
    cache = rules_doc.get("embedding_cache") or None

    try:
        return PipelineConfig(
            chat_url=os.environ.get(
                "TAMPERSCOPE_CHAT_URL", backends.get("chat_url", "http://127.0.0.1:8008")
            ),
            embed_url=os.environ.get(
                "TAMPERSCOPE_EMBED_URL", backends.get("embed_url", "http://127.0.0.1:8008")
            ),
            segment_url=os.environ.get(
                "TAMPERSCOPE_SEGMENT_URL", backends.get("segment_url", "http://127.0.0.1:8008")
            ),
            timeout=float(backends.get("timeout", 60.0)),
            retry_attempts=int(backends.get("retry_attempts", 3)),
            chain=chain,
            query=str(run_doc.get("query", DEFAULT_QUERY)),
            rule_set_path=str(rule_path),
            embedding_cache_path=cache,
            output_dir=str(run_doc.get("output_dir", "tamperscope-out")),
            parallel=int(run_doc.get("parallel", 2)),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc
