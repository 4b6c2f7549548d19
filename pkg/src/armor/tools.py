"""Prediction providers behind a single ``predict`` contract, plus tool accuracy."""

from __future__ import annotations

import csv
import enum
import json
import logging
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import httpx

from armor.domain import Dataset, Label, Prediction, Reaction
from armor.errors import ArmorError, AssetMissing, ConfigError

log = logging.getLogger(__name__)


class Level(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    UNASSIGNED = "Unassigned"


class MalformedRow(ArmorError):
    def __init__(self, line_no: int, detail: str = ""):
        super().__init__(f"malformed prediction row at line {line_no}: {detail}".rstrip(": "))
        self.line_no = line_no


class ValueOutOfDomain(ArmorError):
    def __init__(self, value: Any, line_no: int | None = None):
        where = f" at line {line_no}" if line_no is not None else ""
        super().__init__(f"prediction value {value!r} not in {{0, 1, NA}}{where}")
        self.value = value


class EmptyDataset(ArmorError):
    pass


def load_prediction_table(path: str | Path) -> dict[int, Prediction]:
    """Load an ``idx,prediction`` CSV (with header) or JSONL table."""
    path = Path(path)
    if not path.exists():
        raise AssetMissing(path, "prediction table")
    table: dict[int, Prediction] = {}
    if path.suffix == ".jsonl":
        rows: Iterable[tuple[int, Any]] = []
        parsed = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    parsed.append((line_no, obj["idx"], obj.get("prediction")))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise MalformedRow(line_no, str(exc)) from None
        rows = parsed
    else:
        parsed = []
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            for line_no, row in enumerate(reader, start=1):
                if not row or not "".join(row).strip():
                    continue
                if line_no == 1 and row[0].strip().lower() == "idx":
                    continue
                if len(row) != 2:
                    raise MalformedRow(line_no, f"expected 2 columns, got {len(row)}")
                parsed.append((line_no, row[0].strip(), row[1]))
        rows = parsed
    for line_no, raw_idx, raw_pred in rows:
        try:
            idx = int(raw_idx)
        except (TypeError, ValueError):
            raise MalformedRow(line_no, f"bad idx {raw_idx!r}") from None
        try:
            table[idx] = Prediction.parse(raw_pred)
        except ValueError:
            raise ValueOutOfDomain(raw_pred, line_no) from None
    return table


def save_prediction_table(path: str | Path, table: Mapping[int, Prediction]) -> None:
    from armor.io import atomic_write_text

    lines = ["idx,prediction"] + [f"{idx},{table[idx].value}" for idx in sorted(table)]
    atomic_write_text(path, "\n".join(lines) + "\n")


class Provider:
    """Base class; ``predict`` must never raise."""

    kind = "abstract"

    def predict(self, r: Reaction) -> Prediction:
        try:
            return self._predict(r)
        except Exception as exc:  # noqa: BLE001 - failures become NA by contract
            log.warning("provider %s failed on idx=%s: %s", self.kind, r.idx, exc)
            return Prediction.NA

    def _predict(self, r: Reaction) -> Prediction:
        raise NotImplementedError

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind}


class TableProvider(Provider):
    kind = "table"

    def __init__(self, table: Mapping[int, Prediction], path: str | None = None):
        self.table = dict(table)
        self.path = path

    @classmethod
    def from_path(cls, path: str | Path) -> "TableProvider":
        return cls(load_prediction_table(path), str(path))

    def _predict(self, r: Reaction) -> Prediction:
        return self.table.get(r.idx, Prediction.NA)

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "path": self.path}


# Shared across every HttpProvider instance; resized by configure_http_limit.
_HTTP_SLOTS = threading.BoundedSemaphore(8)


def configure_http_limit(n: int) -> None:
    global _HTTP_SLOTS
    _HTTP_SLOTS = threading.BoundedSemaphore(max(1, n))


class HttpProvider(Provider):
    """POST ``{reactants, product}`` and expect ``{"prediction": 0|1|"NA"}``."""

    kind = "http"

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 1, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self._client = client

    def _predict(self, r: Reaction) -> Prediction:
        payload = {"reactants": r.reactants, "product": r.product}
        client = self._client or httpx.Client(timeout=self.timeout)
        last: Exception | None = None
        try:
            with _HTTP_SLOTS:
                for _ in range(self.retries + 1):
                    try:
                        resp = client.post(self.endpoint, json=payload, timeout=self.timeout)
                        resp.raise_for_status()
                        return Prediction.parse(resp.json()["prediction"])
                    except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
                        last = exc
        finally:
            if self._client is None:
                client.close()
        log.warning("http provider %s gave up on idx=%s: %s", self.endpoint, r.idx, last)
        return Prediction.NA

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "endpoint": self.endpoint}


class LlmPromptingProvider(Provider):
    """Zero-shot feasibility question through an LLM backend (DirectAsk template)."""

    kind = "llm"

    def __init__(self, backend, template_id: str = "DirectAsk"):
        self.backend = backend
        self.template_id = template_id

    def _predict(self, r: Reaction) -> Prediction:
        from armor.llm import direct_ask

        label = direct_ask(self.backend, r)
        return Prediction.from_label(label)

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "template_id": self.template_id}


SCRIPTED_PROVIDERS: dict[str, Callable[[Reaction], Prediction]] = {
    "always-feasible": lambda r: Prediction.PRED1,
    "always-infeasible": lambda r: Prediction.PRED0,
    "always-na": lambda r: Prediction.NA,
    "gold": lambda r: Prediction.NA if r.label is None else Prediction.from_label(r.label),
    "anti-gold": lambda r: Prediction.NA if r.label is None else Prediction.from_label(Label(1 - r.label)),
}


class ScriptedProvider(Provider):
    kind = "scripted"

    def __init__(self, scenario_id: str, fn: Callable[[Reaction], Prediction] | None = None):
        if fn is None:
            if scenario_id not in SCRIPTED_PROVIDERS:
                raise ConfigError(f"unknown scripted provider scenario {scenario_id!r}")
            fn = SCRIPTED_PROVIDERS[scenario_id]
        self.scenario_id = scenario_id
        self.fn = fn

    def _predict(self, r: Reaction) -> Prediction:
        return Prediction.parse(self.fn(r))

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "scenario_id": self.scenario_id}


@dataclass(frozen=True)
class ToolRecord:
    tool_id: str
    display_name: str = ""
    level: Level = Level.UNASSIGNED
    val_accuracy: float | None = None
    provider: Provider | None = field(default=None, compare=False, repr=False)

    def with_level(self, level: Level, val_accuracy: float | None = None) -> "ToolRecord":
        acc = self.val_accuracy if val_accuracy is None else val_accuracy
        return replace(self, level=level, val_accuracy=acc)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "tool_id": self.tool_id,
            "display_name": self.display_name or self.tool_id,
            "level": self.level.value,
            "val_accuracy": self.val_accuracy,
        }
        if self.provider is not None:
            out["provider"] = self.provider.describe()
        return out


def predict(tool: ToolRecord, r: Reaction) -> Prediction:
    if tool.provider is None:
        log.warning("tool %s has no provider bound; returning NA", tool.tool_id)
        return Prediction.NA
    return tool.provider.predict(r)


def tool_accuracy(tool: ToolRecord | str, dataset: Dataset) -> float:
    """Fraction of reactions whose prediction equals the label; NA counts as wrong."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot compute accuracy on an empty dataset")
    tool_id = tool if isinstance(tool, str) else tool.tool_id
    correct = sum(1 for r in dataset if dataset.prediction(tool_id, r.idx).matches(r.label))
    return correct / len(dataset)


def provider_from_spec(spec: Mapping[str, Any], split: str | None = None, base_dir: Path | None = None, backend=None) -> Provider:
    kind = spec.get("kind")
    if kind == "table":
        path = str(spec["path"]).replace("{split}", split or "")
        p = Path(path)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return TableProvider.from_path(p)
    if kind == "http":
        return HttpProvider(spec["endpoint"], float(spec.get("timeout", 30.0)), int(spec.get("retries", 1)))
    if kind == "llm":
        if backend is None:
            raise ConfigError("llm provider requires a configured LLM backend")
        return LlmPromptingProvider(backend, spec.get("template_id", "DirectAsk"))
    if kind == "scripted":
        return ScriptedProvider(spec["scenario_id"])
    raise ConfigError(f"unknown provider kind {kind!r}")


def load_registry(path: str | Path, split: str | None = None, backend=None) -> list[ToolRecord]:
    """Read a tool registry JSON list; provider bindings are resolved for ``split``."""
    path = Path(path)
    if not path.exists():
        raise AssetMissing(path, "tool registry")
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    tools = []
    seen = set()
    for row in rows:
        tool_id = row["tool_id"]
        if tool_id in seen:
            raise ConfigError(f"duplicate tool_id {tool_id!r} in registry")
        seen.add(tool_id)
        provider = None
        if "provider" in row and split is not None:
            provider = provider_from_spec(row["provider"], split, path.parent, backend)
        tools.append(
            ToolRecord(
                tool_id,
                row.get("display_name", tool_id),
                Level(row.get("level", Level.UNASSIGNED.value)),
                row.get("val_accuracy"),
                provider,
            )
        )
    return tools


def materialize(tools: Iterable[ToolRecord], dataset: Dataset, workers: int = 1) -> Dataset:
    """Fill in prediction columns for tools the dataset does not already carry."""
    from concurrent.futures import ThreadPoolExecutor

    out = dataset
    for tool in tools:
        if tool.tool_id in out.predictions or tool.provider is None:
            continue
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                preds = list(pool.map(lambda r: predict(tool, r), dataset.reactions))
        else:
            preds = [predict(tool, r) for r in dataset.reactions]
        out = out.with_predictions(tool.tool_id, {r.idx: p for r, p in zip(dataset.reactions, preds)})
    return out
