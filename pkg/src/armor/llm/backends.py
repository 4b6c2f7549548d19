"""Chat-completion backends: remote HTTP, scripted scenarios, and a recorder."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx

from armor.errors import ArmorError, AssetMissing
from armor.io import read_jsonl
from armor.llm.templates import TemplateId, render_prompt

log = logging.getLogger(__name__)

# sampling is never enabled
DECODING = {"do_sample": False, "temperature": 0.0}


class LlmError(ArmorError):
    code = "BackendFailure"


class BackendUnavailable(LlmError):
    pass


class ScenarioMissing(LlmError):
    pass


def bindings_hash(bindings: Mapping[str, Any]) -> str:
    """SHA-256 over the sorted-key JSON of the bindings."""
    text = json.dumps(bindings, sort_keys=True, ensure_ascii=False, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LlmRequest:
    template_id: str
    bindings: Mapping[str, Any]
    prompt: str
    max_tokens: int = 1024
    attempt: int = 0
    # structured side-channel for scripted responders; never sent over the wire
    context: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)
    decoding: Mapping[str, Any] = field(default_factory=lambda: dict(DECODING))

    @property
    def bindings_hash(self) -> str:
        return bindings_hash(self.bindings)


def build_request(
    template_id: TemplateId | str,
    bindings: Mapping[str, Any],
    context: Mapping[str, Any] | None = None,
    max_tokens: int = 1024,
) -> LlmRequest:
    tid = TemplateId(template_id)
    prompt = render_prompt(tid, bindings)
    return LlmRequest(tid.value, dict(bindings), prompt, max_tokens, 0, dict(context or {}))


@dataclass(frozen=True)
class LlmResponse:
    text: str
    backend: str
    truncated: bool = False


class Backend:
    name = "abstract"

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, request: LlmRequest) -> LlmResponse:
        with self._lock:
            self.calls += 1
        return self._complete(request)

    def _complete(self, request: LlmRequest) -> LlmResponse:
        raise NotImplementedError


Responder = Callable[[LlmRequest], "str | None"]


class Scenario:
    """Deterministic responses keyed by ``(template_id, bindings_hash[, attempt])``.

    Lookup order: exact entry for the attempt, entry for any attempt, the
    programmatic responder (if any), then the per-template default.
    """

    def __init__(
        self,
        scenario_id: str,
        entries: Mapping[tuple, str] | None = None,
        defaults: Mapping[str, str] | None = None,
        responder: Responder | None = None,
    ):
        self.scenario_id = scenario_id
        self.entries = dict(entries or {})
        self.defaults = dict(defaults or {})
        self.responder = responder

    def add(self, template_id: str, bindings_hash: str, response: str, attempt: int | None = None) -> None:
        self.entries[(template_id, bindings_hash, attempt)] = response

    def lookup(self, request: LlmRequest) -> str:
        h = request.bindings_hash
        for key in ((request.template_id, h, request.attempt), (request.template_id, h, None)):
            if key in self.entries:
                return self.entries[key]
        if self.responder is not None:
            out = self.responder(request)
            if out is not None:
                return out
        if request.template_id in self.defaults:
            return self.defaults[request.template_id]
        raise ScenarioMissing(
            f"scenario {self.scenario_id!r} has no response for {request.template_id} ({h[:12]})"
        )

    @classmethod
    def from_file(cls, path: str | Path, scenario_id: str | None = None) -> "Scenario":
        """Load ``{template_id, bindings_hash, response[, attempt]}`` JSONL.

        Lines with ``bindings_hash == "*"`` set the template's default response.
        """
        path = Path(path)
        if not path.exists():
            raise AssetMissing(path, "scenario file")
        scen = cls(scenario_id or path.stem)
        for row in read_jsonl(path):
            if row["bindings_hash"] == "*":
                scen.defaults[row["template_id"]] = row["response"]
            else:
                scen.add(row["template_id"], row["bindings_hash"], row["response"], row.get("attempt"))
        return scen


_SCENARIOS: dict[str, Scenario] = {}


def register_scenario(scenario: Scenario) -> Scenario:
    _SCENARIOS[scenario.scenario_id] = scenario
    return scenario


def get_scenario(scenario_id: str) -> Scenario:
    if scenario_id not in _SCENARIOS:
        raise ScenarioMissing(f"scenario {scenario_id!r} is not registered")
    return _SCENARIOS[scenario_id]


def scripted_lookup(scenario_id: str, request: LlmRequest) -> str:
    return get_scenario(scenario_id).lookup(request)


class ScriptedBackend(Backend):
    name = "scripted"

    def __init__(self, scenario: Scenario | str):
        super().__init__()
        self.scenario = get_scenario(scenario) if isinstance(scenario, str) else scenario

    def _complete(self, request: LlmRequest) -> LlmResponse:
        text = self.scenario.lookup(request)
        return LlmResponse(text, f"scripted:{self.scenario.scenario_id}")


class RemoteBackend(Backend):
    """OpenAI-style chat-completion endpoint with a single user message."""

    name = "remote"

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str = "default",
        timeout: float = 120.0,
        max_in_flight: int = 4,
        client: httpx.Client | None = None,
    ):
        super().__init__()
        self.endpoint = endpoint or os.environ.get("ARMOR_LLM_ENDPOINT")
        self.api_key = api_key if api_key is not None else os.environ.get("ARMOR_LLM_KEY")
        self.model = model
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._client = client

    def _complete(self, request: LlmRequest) -> LlmResponse:
        if not self.endpoint:
            raise BackendUnavailable("ARMOR_LLM_ENDPOINT is not set")
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": 0,
            "max_tokens": request.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        client = self._client or httpx.Client(timeout=self.timeout)
        try:
            with self._slots:
                resp = client.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
            truncated = choice.get("finish_reason") == "length"
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"remote backend failed: {exc}") from exc
        finally:
            if self._client is None:
                client.close()
        return LlmResponse(text or "", self.name, truncated)


class RecordingBackend(Backend):
    """Pass-through that appends each exchange to a scenario file (single writer)."""

    name = "recording"

    def __init__(self, inner: Backend, path: str | Path):
        super().__init__()
        self.inner = inner
        self.path = Path(path)
        self._write_lock = threading.Lock()

    def _complete(self, request: LlmRequest) -> LlmResponse:
        resp = self.inner.complete(request)
        row = {
            "template_id": request.template_id,
            "bindings_hash": request.bindings_hash,
            "attempt": request.attempt,
            "response": resp.text,
        }
        with self._write_lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
        return resp
