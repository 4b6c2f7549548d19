"""Canonical prompt templates and placeholder rendering.

Template bodies contain literal JSON braces, so ``str.format`` is unusable;
only ``{lower_snake}`` tokens are placeholders.
"""

from __future__ import annotations

import enum
import json
import re
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping

from armor.errors import ArmorError

PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


class TemplateId(str, enum.Enum):
    PATTERN_EXTRACTION = "PatternExtraction"
    PATTERN_MATCH = "PatternMatch"
    CONSOLIDATION = "Consolidation"
    MEMORY_BUILD = "MemoryBuild"
    TOOL_SELECT = "ToolSelect"
    # repo-authored zero-shot feasibility question
    DIRECT_ASK = "DirectAsk"


_FILES = {
    TemplateId.PATTERN_EXTRACTION: "pattern_extraction.txt",
    TemplateId.PATTERN_MATCH: "pattern_match.txt",
    TemplateId.CONSOLIDATION: "consolidation.txt",
    TemplateId.MEMORY_BUILD: "memory_build.txt",
    TemplateId.TOOL_SELECT: "tool_select.txt",
    TemplateId.DIRECT_ASK: "direct_ask.txt",
}


class UnboundPlaceholder(ArmorError):
    def __init__(self, name: str, template_id: str):
        super().__init__(f"placeholder {{{name}}} of template {template_id} is unbound")
        self.name = name


@lru_cache(maxsize=None)
def template_body(template_id: TemplateId | str) -> str:
    tid = TemplateId(template_id)
    return resources.files("armor.llm").joinpath("prompts", _FILES[tid]).read_text(encoding="utf-8")


def placeholders(template_id: TemplateId | str) -> list[str]:
    seen: dict[str, None] = {}
    for name in PLACEHOLDER.findall(template_body(template_id)):
        seen.setdefault(name)
    return list(seen)


def _as_text(value: Any) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False)


def render_prompt(template_id: TemplateId | str, bindings: Mapping[str, Any]) -> str:
    """Substitute bindings into the template. Strings go in verbatim; other values are JSON-encoded."""
    tid = TemplateId(template_id)

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in bindings:
            raise UnboundPlaceholder(name, tid.value)
        return _as_text(bindings[name])

    return PLACEHOLDER.sub(sub, template_body(tid))
