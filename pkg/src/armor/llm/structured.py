"""Strict JSON completion: fence stripping, structural schemas, one repair retry."""

from __future__ import annotations

import json
import re
from dataclasses import replace
from typing import Any, Callable, Iterable

from armor.llm.backends import Backend, LlmError, LlmRequest

REPAIR_SUFFIX = "\n\nReturn valid JSON only."

_FENCE = re.compile(r"^```(?:[A-Za-z0-9_-]*[ \t]*\n)?(.*?)\s*```$", re.S)


class JsonInvalid(LlmError):
    pass


class SchemaViolation(LlmError):
    def __init__(self, key: str, detail: str = ""):
        super().__init__(f"schema violation at {key!r}: {detail}".rstrip(": "))
        self.key = key


class ResponseTruncated(LlmError):
    pass


Schema = Callable[[Any], Any]


def strip_fences(text: str) -> str:
    text = text.strip()
    m = _FENCE.match(text)
    return m.group(1).strip() if m else text


def parse_json(text: str) -> Any:
    try:
        return json.loads(strip_fences(text))
    except json.JSONDecodeError as exc:
        raise JsonInvalid(f"response is not valid JSON: {exc.msg}") from None


def _require(obj: Any, key: str, kind: type | tuple, domain: Iterable | None = None) -> Any:
    if not isinstance(obj, dict):
        raise SchemaViolation("$", "top-level value is not an object")
    if key not in obj:
        raise SchemaViolation(key, "missing")
    value = obj[key]
    # bool is an int subclass; keep them apart
    if isinstance(value, bool) and bool not in (kind if isinstance(kind, tuple) else (kind,)):
        raise SchemaViolation(key, f"expected {kind}, got bool")
    if not isinstance(value, kind):
        raise SchemaViolation(key, f"expected {kind}, got {type(value).__name__}")
    if domain is not None and value not in set(domain):
        raise SchemaViolation(key, f"value {value!r} outside domain")
    return value


def pattern_extraction_schema() -> Schema:
    def check(obj: Any) -> Any:
        _require(obj, "often_correct_on", list)
        return obj

    return check


def pattern_match_schema() -> Schema:
    def check(obj: Any) -> Any:
        _require(obj, "belongs_to_rule", bool)
        _require(obj, "confidence", str, ("high", "medium", "low"))
        return obj

    return check


def consolidation_schema() -> Schema:
    def check(obj: Any) -> Any:
        _require(obj, "keep_index", int)
        return obj

    return check


def memory_build_schema(gold_tool: str, neg_tools: Iterable[str]) -> Schema:
    negs = set(neg_tools)

    def check(obj: Any) -> Any:
        _require(obj, "tool", str, (gold_tool,))
        evidence = _require(obj, "evidence", list)
        if not all(isinstance(e, str) for e in evidence):
            raise SchemaViolation("evidence", "items must be strings")
        elim = _require(obj, "elimination", list)
        if len(elim) > 3:
            raise SchemaViolation("elimination", "more than 3 items")
        for item in elim:
            _require(item, "tool", str, negs)
            _require(item, "why_not", str)
        _require(obj, "final_reason", str)
        return obj

    return check


def tool_select_schema(allowed: Iterable[str]) -> Schema:
    domain = set(allowed) | {"abstain"}

    def check(obj: Any) -> Any:
        _require(obj, "tool", str, domain)
        return obj

    return check


def direct_ask_schema() -> Schema:
    def check(obj: Any) -> Any:
        _require(obj, "prediction", int, (0, 1))
        return obj

    return check


def complete_json(backend: Backend, request: LlmRequest, schema: Schema, max_chars: int | None = None) -> Any:
    """Call the backend and return a schema-valid JSON value.

    One repair retry follows a parse or schema failure; a second failure is
    terminal. Truncated or over-long responses are terminal immediately.
    """
    last: LlmError | None = None
    for attempt in (0, 1):
        req = request if attempt == 0 else replace(request, prompt=request.prompt + REPAIR_SUFFIX, attempt=1)
        resp = backend.complete(req)
        if resp.truncated or (max_chars is not None and len(resp.text) > max_chars):
            raise ResponseTruncated(f"{request.template_id} response truncated ({len(resp.text)} chars)")
        try:
            return schema(parse_json(resp.text))
        except (JsonInvalid, SchemaViolation) as exc:
            last = exc
    assert last is not None
    raise last
