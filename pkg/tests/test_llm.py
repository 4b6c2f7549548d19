import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from armor.domain import Label, Reaction
from armor.errors import AssetMissing
from armor.llm import (
    DECODING,
    BackendUnavailable,
    JsonInvalid,
    LlmResponse,
    RecordingBackend,
    RemoteBackend,
    ResponseTruncated,
    Scenario,
    ScenarioMissing,
    SchemaViolation,
    ScriptedBackend,
    TemplateId,
    UnboundPlaceholder,
    bindings_hash,
    build_request,
    complete_json,
    consolidation_schema,
    direct_ask,
    direct_ask_schema,
    memory_build_schema,
    pattern_match_schema,
    placeholders,
    render_prompt,
    strip_fences,
    tool_select_schema,
)
from armor.llm.structured import REPAIR_SUFFIX
from conftest import responder_backend

R = Reaction(0, "CCO", "CC=O")


def test_placeholders_are_ordered_and_unique():
    assert placeholders(TemplateId.PATTERN_MATCH) == ["rule_name", "rule_explanation", "example_json"]
    assert placeholders("DirectAsk") == ["reactants", "product"]


def test_unbound_placeholder():
    with pytest.raises(UnboundPlaceholder) as info:
        render_prompt(TemplateId.DIRECT_ASK, {"reactants": "C"})
    assert info.value.name == "product"


@given(st.text(alphabet="{}_abcdefgh:\"", max_size=20))
def test_values_are_not_resubstituted(value):
    out = render_prompt(TemplateId.DIRECT_ASK, {"reactants": value, "product": "{reactants}"})
    assert value in out and "{reactants}" in out


def test_non_string_values_json_encoded():
    out = render_prompt(TemplateId.CONSOLIDATION, {"n_rules": 3, "rule_name": "x", "candidates_json": [{"a": 1}]})
    assert '[{"a": 1}]' in out and "3" in out


def test_bindings_hash_ignores_key_order():
    assert bindings_hash({"a": 1, "b": "x"}) == bindings_hash({"b": "x", "a": 1})
    assert bindings_hash({"a": 1}) != bindings_hash({"a": 2})


def test_decoding_is_greedy():
    req = build_request(TemplateId.DIRECT_ASK, {"reactants": "C", "product": "O"})
    assert dict(req.decoding) == DECODING == {"do_sample": False, "temperature": 0.0}


@pytest.mark.parametrize(
    "text, out",
    [('```json\n{"a": 1}\n```', '{"a": 1}'), ('```\n[1]\n```', "[1]"), ('  {"a": 1} ', '{"a": 1}'), ("```x```", "x")],
)
def test_strip_fences(text, out):
    assert strip_fences(text) == out


def _scripted(*responses):
    """Backend answering attempt k with responses[k]; records requests."""
    seen = []

    def respond(req):
        seen.append(req)
        return responses[req.attempt]

    return responder_backend(respond), seen


def _direct_request():
    return build_request(TemplateId.DIRECT_ASK, {"reactants": "C", "product": "O"})


def test_repair_retry_appends_suffix():
    backend, seen = _scripted("not json", '{"prediction": 1}')
    assert complete_json(backend, _direct_request(), direct_ask_schema()) == {"prediction": 1}
    assert [r.attempt for r in seen] == [0, 1]
    assert seen[1].prompt == seen[0].prompt + REPAIR_SUFFIX
    assert seen[1].bindings_hash == seen[0].bindings_hash


def test_second_failure_is_terminal():
    backend, seen = _scripted('{"prediction": 3}', '{"prediction": 3}')
    with pytest.raises(SchemaViolation):
        complete_json(backend, _direct_request(), direct_ask_schema())
    assert len(seen) == 2
    backend, _ = _scripted("x", "y")
    with pytest.raises(JsonInvalid):
        complete_json(backend, _direct_request(), direct_ask_schema())


def test_truncation_is_terminal():
    class Truncating(ScriptedBackend):
        def _complete(self, request):
            return LlmResponse('{"prediction": 1}', "t", truncated=True)

    backend = Truncating(Scenario("t"))
    with pytest.raises(ResponseTruncated):
        complete_json(backend, _direct_request(), direct_ask_schema())
    assert backend.calls == 1
    backend, seen = _scripted('{"prediction": 1}    ')
    with pytest.raises(ResponseTruncated):
        complete_json(backend, _direct_request(), direct_ask_schema(), max_chars=10)
    assert len(seen) == 1


def test_schemas_keep_bool_and_int_apart():
    with pytest.raises(SchemaViolation):
        direct_ask_schema()({"prediction": True})
    with pytest.raises(SchemaViolation):
        pattern_match_schema()({"belongs_to_rule": 1, "confidence": "high"})
    with pytest.raises(SchemaViolation):
        consolidation_schema()({"keep_index": False})
    with pytest.raises(SchemaViolation):
        pattern_match_schema()({"belongs_to_rule": True, "confidence": "certain"})
    with pytest.raises(SchemaViolation):
        direct_ask_schema()([1])


def test_tool_select_schema_domain():
    check = tool_select_schema(["a", "b"])
    assert check({"tool": "abstain"}) == {"tool": "abstain"}
    with pytest.raises(SchemaViolation):
        check({"tool": "c"})


def test_memory_build_schema():
    check = memory_build_schema("g", ["n1", "n2"])
    good = {"tool": "g", "evidence": ["e"], "elimination": [{"tool": "n1", "why_not": "x"}], "final_reason": "r"}
    assert check(good) == good
    for bad in (
        {**good, "tool": "n1"},
        {**good, "evidence": [1]},
        {**good, "elimination": [{"tool": "zz", "why_not": "x"}]},
        {**good, "elimination": [{"tool": "n1", "why_not": "x"}] * 4},
    ):
        with pytest.raises(SchemaViolation):
            check(bad)


def test_scenario_file_with_default(tmp_path):
    req = _direct_request()
    rows = [
        {"template_id": "DirectAsk", "bindings_hash": req.bindings_hash, "response": '{"prediction": 0}'},
        {"template_id": "DirectAsk", "bindings_hash": "*", "response": '{"prediction": 1}'},
    ]
    (tmp_path / "s.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    backend = ScriptedBackend(Scenario.from_file(tmp_path / "s.jsonl"))
    assert backend.complete(req).text == '{"prediction": 0}'
    other = build_request(TemplateId.DIRECT_ASK, {"reactants": "N", "product": "O"})
    assert backend.complete(other).text == '{"prediction": 1}'
    with pytest.raises(ScenarioMissing):
        backend.complete(build_request(TemplateId.CONSOLIDATION, {"n_rules": 1, "rule_name": "x", "candidates_json": "[]"}))
    with pytest.raises(AssetMissing):
        Scenario.from_file(tmp_path / "missing.jsonl")


def test_recording_then_replay(tmp_path):
    inner, _ = _scripted("bad", '{"prediction": 0}')
    rec = RecordingBackend(inner, tmp_path / "rec.jsonl")
    assert direct_ask(rec, R) is Label.INFEASIBLE
    replay = ScriptedBackend(Scenario.from_file(tmp_path / "rec.jsonl"))
    assert direct_ask(replay, R) is Label.INFEASIBLE
    assert replay.calls == 2


def test_remote_backend_request_shape():
    seen = []

    def handler(req):
        seen.append((req.headers.get("authorization"), json.loads(req.content)))
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"prediction": 1}'}, "finish_reason": "stop"}]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    backend = RemoteBackend("http://llm.local/v1/chat", api_key="k", model="m", client=client)
    assert direct_ask(backend, R) is Label.FEASIBLE
    auth, body = seen[0]
    assert auth == "Bearer k"
    assert body["model"] == "m" and body["temperature"] == 0
    assert body["messages"][0]["role"] == "user" and "CCO" in body["messages"][0]["content"]


def test_remote_backend_length_finish_is_truncation():
    resp = {"choices": [{"message": {"content": '{"prediction": 1}'}, "finish_reason": "length"}]}
    client = httpx.Client(transport=httpx.MockTransport(lambda req: httpx.Response(200, json=resp)))
    with pytest.raises(ResponseTruncated):
        direct_ask(RemoteBackend("http://x", client=client), R)


def test_remote_backend_failures(monkeypatch):
    monkeypatch.delenv("ARMOR_LLM_ENDPOINT", raising=False)
    with pytest.raises(BackendUnavailable):
        direct_ask(RemoteBackend(), R)
    client = httpx.Client(transport=httpx.MockTransport(lambda req: httpx.Response(500)))
    with pytest.raises(BackendUnavailable):
        direct_ask(RemoteBackend("http://x", client=client), R)
