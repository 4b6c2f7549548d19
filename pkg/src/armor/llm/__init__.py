"""LLM access: prompt templates, backends, and schema-checked JSON completion."""

from __future__ import annotations

from armor.domain import Label, Reaction
from armor.llm.backends import (
    DECODING,
    Backend,
    BackendUnavailable,
    LlmError,
    LlmRequest,
    LlmResponse,
    RecordingBackend,
    RemoteBackend,
    Scenario,
    ScenarioMissing,
    ScriptedBackend,
    bindings_hash,
    build_request,
    get_scenario,
    register_scenario,
    scripted_lookup,
)
from armor.llm.structured import (
    JsonInvalid,
    ResponseTruncated,
    SchemaViolation,
    complete_json,
    consolidation_schema,
    direct_ask_schema,
    memory_build_schema,
    parse_json,
    pattern_extraction_schema,
    pattern_match_schema,
    strip_fences,
    tool_select_schema,
)
from armor.llm.templates import TemplateId, UnboundPlaceholder, placeholders, render_prompt, template_body


def direct_ask(backend: Backend, r: Reaction, max_chars: int | None = None) -> Label:
    """Zero-shot feasibility question; raises ``LlmError`` on terminal failure."""
    req = build_request(
        TemplateId.DIRECT_ASK,
        {"reactants": r.reactants, "product": r.product},
        context={"idx": r.idx},
        max_tokens=256,
    )
    out = complete_json(backend, req, direct_ask_schema(), max_chars)
    return Label(out["prediction"])


__all__ = [
    "DECODING",
    "Backend",
    "BackendUnavailable",
    "JsonInvalid",
    "LlmError",
    "LlmRequest",
    "LlmResponse",
    "RecordingBackend",
    "RemoteBackend",
    "ResponseTruncated",
    "Scenario",
    "ScenarioMissing",
    "SchemaViolation",
    "ScriptedBackend",
    "TemplateId",
    "UnboundPlaceholder",
    "bindings_hash",
    "build_request",
    "complete_json",
    "consolidation_schema",
    "direct_ask",
    "direct_ask_schema",
    "get_scenario",
    "memory_build_schema",
    "parse_json",
    "pattern_extraction_schema",
    "pattern_match_schema",
    "placeholders",
    "register_scenario",
    "render_prompt",
    "scripted_lookup",
    "strip_fences",
    "template_body",
    "tool_select_schema",
]
