"""Versioned prompt templates for the reasoning loop.

Templates live as repo files under prompts/<template_id>/ and are selected
by ChainConfig.prompt_template_id so runs are reproducible and auditable.
The reasoning-message schema document is embedded verbatim at render time.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

DEFAULT_TEMPLATE_ID = "default-v1"


class PromptTemplateError(ValueError):
    """Unknown template id or unreadable template file."""


@dataclass(frozen=True)
class PromptTemplates:
    template_id: str
    coarse: str
    refine: str
    consolidate: str
    schema_text: str


def _read(template_id: str, name: str) -> str:
    try:
        root = resources.files("tamperscope")
        return (root / "prompts" / template_id / name).read_text(encoding="utf-8")
    except (FileNotFoundError, OSError) as exc:
        raise PromptTemplateError(
            f"prompt template {template_id!r} has no {name}: {exc}"
        ) from exc


def load_templates(template_id: str = DEFAULT_TEMPLATE_ID) -> PromptTemplates:
    schema_text = (
        resources.files("tamperscope") / "schemas" / "reasoning_message.schema.json"
    ).read_text(encoding="utf-8")
    return PromptTemplates(
        template_id=template_id,
        coarse=_read(template_id, "coarse.txt"),
        refine=_read(template_id, "refine.txt"),
        consolidate=_read(template_id, "consolidate.txt"),
        schema_text=schema_text,
    )


def _fill(template: str, mapping: dict[str, str]) -> str:
    out = template
    for key, value in mapping.items():
        out = out.replace("{{" + key + "}}", value)
    return out


def render_coarse(
    templates: PromptTemplates, query: str, rules_block: str, dims: tuple[int, int]
) -> str:
    return _fill(
        templates.coarse,
        {
            "QUERY": query,
            "RULES": rules_block,
            "SCHEMA": templates.schema_text,
            "WIDTH": str(dims[0]),
            "HEIGHT": str(dims[1]),
        },
    )


def render_refine(
    templates: PromptTemplates,
    rules_block: str,
    previous_json: str,
    prev_step: int,
    step: int,
    dims: tuple[int, int],
) -> str:
    return _fill(
        templates.refine,
        {
            "RULES": rules_block,
            "PREVIOUS": previous_json,
            "PREV_STEP": str(prev_step),
            "STEP": str(step),
            "SCHEMA": templates.schema_text,
            "WIDTH": str(dims[0]),
            "HEIGHT": str(dims[1]),
        },
    )


def render_consolidate(
    templates: PromptTemplates,
    rules_block: str,
    previous_json: str,
    prev_step: int,
    dims: tuple[int, int],
) -> str:
    return _fill(
        templates.consolidate,
        {
            "RULES": rules_block,
            "PREVIOUS": previous_json,
            "PREV_STEP": str(prev_step),
            "SCHEMA": templates.schema_text,
            "WIDTH": str(dims[0]),
            "HEIGHT": str(dims[1]),
        },
    )
