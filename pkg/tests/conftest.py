from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping

import pytest

from armor.domain import Dataset, Label, Prediction, Reaction, Split
from armor.llm import LlmRequest, Scenario, ScriptedBackend

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def make_dataset(
    rows: Iterable[tuple[int, Label | int | None, Mapping[str, object]]],
    split: Split = Split.VALIDATION,
    smiles: Callable[[int], tuple[str, str]] | None = None,
) -> Dataset:
    """``rows`` are ``(idx, label, {tool: raw prediction})``."""
    reactions, preds = [], {}
    for idx, label, tools in rows:
        reac, prod = smiles(idx) if smiles else (f"CC{'C' * (idx % 7)}O.N", f"CC{'C' * (idx % 7)}N")
        reactions.append(Reaction(idx, reac, prod, None if label is None else Label(label)))
        for t, p in tools.items():
            preds.setdefault(t, {})[idx] = Prediction.parse(p)
    return Dataset(split, tuple(reactions), preds)


def responder_backend(fn: Callable[[LlmRequest], str | None], name: str = "test") -> ScriptedBackend:
    return ScriptedBackend(Scenario(name, responder=fn))


def coverage_backend(covered: Callable[[str, int], bool]) -> ScriptedBackend:
    """PatternMatch responder driven by ``covered(rule_name, idx)``."""

    def respond(req: LlmRequest) -> str | None:
        if req.template_id != "PatternMatch":
            return None
        name = json.loads(req.bindings["rule_name"])
        idx = json.loads(req.bindings["example_json"])["idx"]
        return json.dumps({"belongs_to_rule": bool(covered(name, idx)), "confidence": "high", "reason": "x"})

    return responder_backend(respond, "coverage")


def stable_coin(*parts: object) -> bool:
    return hashlib.sha256("|".join(map(str, parts)).encode()).digest()[0] % 2 == 1


@pytest.fixture
def record_criterion(request):
    """Context manager that records PASS/FAIL for an acceptance criterion."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    @contextmanager
    def record(number: int, summary: str):
        try:
            yield
        except BaseException:
            results[number] = ("FAIL", summary)
            raise
        results[number] = ("PASS", summary)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, summary = results[number]
        terminalreporter.write_line(f"criterion {number}: {status} - {summary}")
