"""Hierarchy construction, offline asset building and the three-stage inference flow."""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from armor.chem import Fingerprint
from armor.config import Ablation, ArmorConfig
from armor.domain import Dataset, Label, Prediction, Reaction
from armor.errors import ArmorError, ConfigError
from armor.evaluation import category_breakdown, classification_metrics, majority_vote, tool_usage_report
from armor.io import digest
from armor.llm import (
    Backend,
    LlmError,
    RecordingBackend,
    RemoteBackend,
    Scenario,
    ScriptedBackend,
    TemplateId,
    build_request,
    complete_json,
    direct_ask,
    tool_select_schema,
)
from armor.memory import ConflictMemory, ContrastiveInstance, build_instances, format_candidates, retrieve_demonstrations
from armor.patterns import (
    CoverageJudge,
    Pattern,
    consolidate_patterns,
    disagreement_set,
    extract_patterns,
    finalize_pattern_set,
    flatten,
    refine_patterns,
    sample_diagnostic_subsets,
    score_confidence,
    select_tools,
)
from armor.tools import Level, ToolRecord, predict, tool_accuracy

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    T1_CONSENSUS = "T1Consensus"
    TS_CONSENSUS = "TsConsensus"
    CONFLICT_RESOLVED = "ConflictResolved"
    FALLBACK_DIRECT = "FallbackDirect"
    FALLBACK_MAJORITY = "FallbackMajority"


class EmptyToolset(ArmorError):
    pass


class ConflictUnresolved(ArmorError):
    code = "BackendFailure"


@dataclass(frozen=True)
class Hierarchy:
    l1: tuple[str, ...]
    l2: tuple[str, ...]
    rho: float
    accuracy: Mapping[str, float] = field(default_factory=dict, compare=False)

    @property
    def all_tools(self) -> list[str]:
        return [*self.l1, *self.l2]

    def level(self, tool_id: str) -> Level:
        if tool_id in self.l1:
            return Level.L1
        if tool_id in self.l2:
            return Level.L2
        return Level.UNASSIGNED

    def to_json(self) -> dict:
        return {"l1": list(self.l1), "l2": list(self.l2), "rho": self.rho, "accuracy": dict(self.accuracy)}

    @classmethod
    def from_json(cls, d: Mapping) -> "Hierarchy":
        return cls(tuple(d["l1"]), tuple(d["l2"]), float(d["rho"]), dict(d.get("accuracy", {})))


def build_hierarchy(tools: Sequence[ToolRecord | str], val: Dataset, rho: float = 25.0) -> tuple[Hierarchy, list[ToolRecord]]:
    """Rank tools by validation accuracy; the top ``max(1, floor(n * rho / 100))`` form level 1."""
    records = [t if isinstance(t, ToolRecord) else ToolRecord(t, t) for t in tools]
    if not records:
        raise EmptyToolset("no tools to rank")
    acc = {t.tool_id: tool_accuracy(t, val) for t in records}
    ranked = sorted(records, key=lambda t: (-acc[t.tool_id], t.tool_id))
    n1 = max(1, int(len(records) * rho // 100))
    l1 = tuple(t.tool_id for t in ranked[:n1])
    l2 = tuple(t.tool_id for t in ranked[n1:])
    hier = Hierarchy(l1, l2, rho, acc)
    updated = [t.with_level(hier.level(t.tool_id), acc[t.tool_id]) for t in records]
    return hier, updated


def consensus(predictions: Sequence[Prediction]) -> Label | None:
    """The shared label iff all predictions are the same non-NA value."""
    if not predictions:
        raise ValueError("consensus of an empty prediction list")
    values = set(predictions)
    if len(values) == 1 and Prediction.NA not in values:
        return next(iter(values)).as_label()
    return None


@dataclass
class DecisionTrace:
    idx: int
    stage: Stage
    final: Label
    selected_tools: list[str] = field(default_factory=list)
    chosen_tool: str | None = None
    demonstrations_used: int = 0
    gold: Label | None = None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "idx": self.idx,
            "stage": self.stage.value,
            "final": int(self.final),
            "gold": None if self.gold is None else int(self.gold),
            "selected_tools": list(self.selected_tools),
            "chosen_tool": self.chosen_tool,
            "demonstrations_used": self.demonstrations_used,
            "notes": list(self.notes),
        }


def format_demonstrations(demos: Sequence[ContrastiveInstance], patterns_by_id: Mapping[str, Pattern]) -> str:
    if not demos:
        return ""

    def rule(pid: str) -> str:
        p = patterns_by_id.get(pid)
        return p.name if p is not None else pid

    lines = ["", "Demonstrations from similar reactions (each shows which tool was trusted and why):"]
    for k, d in enumerate(demos, start=1):
        negs = ", ".join(f'"{t}" (rule: {rule(pid)})' for t, pid in zip(d.neg_tools, d.neg_pattern_ids))
        lines += [
            "",
            f"Demonstration {k}:",
            f"- reactants: {d.reactants}",
            f"- product: {d.product}",
            f"- trusted tool: \"{d.pos_tool}\" (rule: {rule(d.pos_pattern_id)})",
            f"- non-trusted tools: {negs}",
            f"- reasoning: {json.dumps(d.rationale, ensure_ascii=False, sort_keys=True)}",
        ]
    return "\n".join(lines) + "\n"


def resolve_conflict(
    r: Reaction,
    selected: Sequence[tuple[str, Pattern]],
    predictions: Mapping[str, Prediction],
    demos: Sequence[ContrastiveInstance],
    backend: Backend,
    patterns_by_id: Mapping[str, Pattern] | None = None,
    conf_hint: str = "",
    tiebreak: str = "",
    max_chars: int | None = None,
) -> tuple[str, Label]:
    """Ask the LLM which selected tool to trust; raise ``ConflictUnresolved`` on abstain/invalid."""
    patterns_by_id = patterns_by_id or {}
    allowed = [t for t, _ in selected]
    cands = [{"tool": t, "prediction": predictions.get(t, Prediction.NA), "pattern": p} for t, p in selected]
    bindings = {
        "reactants": r.reactants,
        "product": r.product,
        "cands_section": format_candidates(cands),
        "conf_hint": conf_hint,
        "tiebreak": tiebreak,
        "demos_section": format_demonstrations(demos, patterns_by_id),
        "allowed_str": ", ".join(allowed),
    }
    context = {
        "idx": r.idx,
        "candidates": [
            {"tool": t, "prediction": predictions.get(t, Prediction.NA).to_json(), "conf": p.conf, "pattern_id": p.pattern_id}
            for t, p in selected
        ],
        "demos": [d.to_json() for d in demos],
    }
    req = build_request(TemplateId.TOOL_SELECT, bindings, context=context, max_tokens=512)
    try:
        out = complete_json(backend, req, tool_select_schema(allowed), max_chars)
    except LlmError as exc:
        raise ConflictUnresolved(f"tool selection failed: {exc}") from exc
    tool = out["tool"]
    if tool == "abstain":
        raise ConflictUnresolved("resolver abstained")
    label = predictions.get(tool, Prediction.NA).as_label()
    if label is None:
        raise ConflictUnresolved(f"resolver chose {tool}, whose prediction is NA")
    return tool, label


@dataclass
class Armor:
    """Loaded assets plus the per-reaction decision procedure."""

    config: ArmorConfig
    tools: list[ToolRecord]
    hierarchy: Hierarchy
    final_patterns: Mapping[str, Sequence[Pattern]]
    backend: Backend
    memory: ConflictMemory | None = None
    judge: CoverageJudge | None = None
    query_fingerprints: Mapping[int, Fingerprint] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.judge is None:
            self.judge = CoverageJudge(self.backend, workers=1, max_chars=self.config.llm_max_chars)
        self.patterns_by_id = {p.pattern_id: p for p in flatten(self.final_patterns)}
        self.tool_ids = [t.tool_id for t in self.tools]
        self._tool_by_id = {t.tool_id: t for t in self.tools}

    def _predictions(self, r: Reaction, predictions: Mapping[str, Prediction] | None) -> dict[str, Prediction]:
        if predictions is not None:
            return {t: predictions.get(t, Prediction.NA) for t in self.tool_ids}
        return {t: predict(self._tool_by_id[t], r) for t in self.tool_ids}

    def _fallback(self, r: Reaction, preds: Mapping[str, Prediction], voters: Sequence[str], trace: DecisionTrace) -> None:
        try:
            trace.final = direct_ask(self.backend, r, self.config.llm_max_chars)
            trace.stage = Stage.FALLBACK_DIRECT
            return
        except LlmError as exc:
            trace.notes.append(f"direct ask failed: {exc}")
        trace.final = majority_vote([preds[t] for t in voters])
        trace.stage = Stage.FALLBACK_MAJORITY

    def predict_reaction(self, r: Reaction, predictions: Mapping[str, Prediction] | None = None) -> tuple[Label, DecisionTrace]:
        cfg = self.config
        preds = self._predictions(r, predictions)
        trace = DecisionTrace(r.idx, Stage.FALLBACK_MAJORITY, Label.INFEASIBLE, gold=r.label)

        if cfg.ablation is Ablation.WITHOUT_HIERARCHY:
            trace.final = majority_vote([preds[t] for t in self.tool_ids])
            return trace.final, trace

        agreed = consensus([preds[t] for t in self.hierarchy.l1])
        if agreed is not None:
            trace.stage, trace.final = Stage.T1_CONSENSUS, agreed
            return agreed, trace

        if cfg.ablation is Ablation.WITHOUT_UTILITY:
            trace.final = majority_vote([preds[t] for t in self.tool_ids])
            return trace.final, trace

        val_acc = {t.tool_id: t.val_accuracy or 0.0 for t in self.tools}
        selected = select_tools(r, self.final_patterns, self.judge, cfg.top_l, val_acc)
        trace.selected_tools = [t for t, _ in selected]
        if not selected:
            trace.notes.append("no tool selected")
            self._fallback(r, preds, self.tool_ids, trace)
            return trace.final, trace

        votes = {preds[t] for t, _ in selected} - {Prediction.NA}
        if len(votes) == 1:
            trace.stage, trace.final = Stage.TS_CONSENSUS, next(iter(votes)).as_label()
            return trace.final, trace

        if cfg.ablation is Ablation.WITHOUT_CONFLICT:
            trace.final = majority_vote([preds[t] for t, _ in selected])
            return trace.final, trace

        demos = retrieve_demonstrations(self.memory, r, cfg.top_k, cfg.seed, self.query_fingerprints.get(r.idx))
        trace.demonstrations_used = len(demos)
        try:
            tool, label = resolve_conflict(
                r, selected, preds, demos, self.backend, self.patterns_by_id,
                cfg.conf_hint, cfg.tiebreak, cfg.llm_max_chars,
            )
        except ConflictUnresolved as exc:
            trace.notes.append(str(exc))
            self._fallback(r, preds, trace.selected_tools, trace)
            return trace.final, trace
        trace.stage, trace.final, trace.chosen_tool = Stage.CONFLICT_RESOLVED, label, tool
        return label, trace

    def asset_digests(self) -> dict[str, str]:
        out = {
            "hierarchy": digest(self.hierarchy.to_json()),
            "patterns": digest({t: [p.to_json() for p in ps] for t, ps in sorted(self.final_patterns.items())}),
        }
        if self.memory is not None:
            out["memory"] = digest(
                {"instances": self.memory.to_json(), "fingerprints": {str(k): v.to_hex() for k, v in sorted(self.memory.fingerprints.items())}}
            )
        return out

    def run_batch(self, dataset: Dataset) -> dict[str, Any]:
        """Predict every reaction; the report is a pure function of assets, data, config and backend."""
        tool_ids = self.tool_ids

        def one(r: Reaction) -> DecisionTrace:
            return self.predict_reaction(r, dataset.predictions_for(r.idx, tool_ids))[1]

        if self.config.workers > 1:
            with ThreadPoolExecutor(self.config.workers) as pool:
                traces = list(pool.map(one, dataset.reactions))
        else:
            traces = [one(r) for r in dataset.reactions]
        rows = [t.to_json() for t in traces]
        stage_counts = {s.value: sum(1 for t in traces if t.stage is s) for s in Stage}
        report: dict[str, Any] = {
            "split": dataset.split.value,
            "n_reactions": len(dataset),
            "provenance": {
                "seed": self.config.seed,
                "ablation": self.config.ablation.value,
                "config_digest": self.config.digest,
                "asset_digests": self.asset_digests(),
                "dataset_digest": digest([[r.idx, r.reactants, r.product] for r in dataset]),
            },
            "stage_counts": stage_counts,
            "categories": category_breakdown(rows),
            "traces": rows,
        }
        levels = {t: self.hierarchy.level(t).value for t in tool_ids}
        if dataset.labeled:
            report["metrics"] = classification_metrics([(r.label, t.final) for r, t in zip(dataset.reactions, traces)])
            full_acc = {t: tool_accuracy(t, dataset) for t in tool_ids}
        else:
            full_acc = {}
        report["tool_usage"] = tool_usage_report(rows, full_acc, levels)
        if not full_acc:
            for u in report["tool_usage"]["tools"].values():
                u["full_acc"] = None
        return report


# --- offline asset building ---------------------------------------------------


def mine_patterns(val: Dataset, hierarchy: Hierarchy, backend: Backend, config: ArmorConfig) -> tuple[list[Pattern], dict]:
    """Diagnostic sampling plus LLM extraction for every tool (Raw patterns)."""
    pool = disagreement_set(val, hierarchy.l1)
    raw: list[Pattern] = []
    stats = {"pool_size": len(pool), "subsets": 0, "subsets_skipped": 0, "patterns_raw": 0}
    for tool_id in sorted(hierarchy.all_tools):
        subsets, skipped = sample_diagnostic_subsets(val, tool_id, pool, config.m, config.n_schedule, config.seed)
        stats["subsets"] += len(subsets)
        stats["subsets_skipped"] += len(skipped)
        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as ex:
                found = list(ex.map(lambda s: extract_patterns(tool_id, s, val, backend, config.llm_max_chars), subsets))
        else:
            found = [extract_patterns(tool_id, s, val, backend, config.llm_max_chars) for s in subsets]
        for ps in found:
            raw.extend(ps)
    stats["patterns_raw"] = len(raw)
    return raw, stats


def refine_stage(raw: Sequence[Pattern], val: Dataset, judge: CoverageJudge, config: ArmorConfig) -> tuple[list[Pattern], dict]:
    refined = refine_patterns(raw, val, judge, config.tau1, config.tau2)
    return refined, {"patterns_in": len(raw), "patterns_kept": len(refined), "patterns_dropped": len(raw) - len(refined)}


def consolidate_stage(
    refined: Sequence[Pattern],
    val: Dataset,
    hierarchy: Hierarchy,
    judge: CoverageJudge,
    backend: Backend,
    config: ArmorConfig,
) -> tuple[dict[str, list[Pattern]], dict]:
    """Same-name consolidation, Conf over the disagreement pool, and the top-5 cut."""
    pool = disagreement_set(val, hierarchy.l1)
    consolidated: list[Pattern] = []
    for tool_id in sorted(hierarchy.all_tools):
        consolidated.extend(consolidate_patterns(refined, tool_id, backend, config.llm_max_chars))
    scored = score_confidence(consolidated, pool, val, judge)
    final = finalize_pattern_set(scored, config.tau3)
    n_final = sum(len(v) for v in final.values())
    return final, {
        "patterns_in": len(refined),
        "patterns_consolidated": len(consolidated),
        "patterns_scored": len(scored),
        "patterns_final": n_final,
        "tools_with_patterns": len(final),
    }


def build_memory_stage(
    val: Dataset,
    hierarchy: Hierarchy,
    final: Mapping[str, Sequence[Pattern]],
    judge: CoverageJudge,
    backend: Backend,
    config: ArmorConfig,
    precomputed: Mapping[int, Fingerprint] | None = None,
) -> tuple[ConflictMemory, dict]:
    pool = disagreement_set(val, hierarchy.l1)
    memory = build_instances(
        pool, final, val, judge, backend, config.fp_width, config.fp_nmax, precomputed, config.workers, config.llm_max_chars
    )
    return memory, {"memory_reactions": len(memory), "memory_instances": memory.n_instances}


def fit(
    val: Dataset,
    tools: Sequence[ToolRecord | str],
    backend: Backend,
    config: ArmorConfig,
    judge: CoverageJudge | None = None,
) -> tuple[Armor, dict]:
    """Build every asset from a labeled validation set and return a ready pipeline."""
    judge = judge or CoverageJudge(backend, workers=config.workers, max_chars=config.llm_max_chars)
    hierarchy, records = build_hierarchy(tools, val, config.rho)
    raw, s1 = mine_patterns(val, hierarchy, backend, config)
    refined, s2 = refine_stage(raw, val, judge, config)
    final, s3 = consolidate_stage(refined, val, hierarchy, judge, backend, config)
    memory, s4 = build_memory_stage(val, hierarchy, final, judge, backend, config)
    stats = {"extract": s1, "refine": s2, "consolidate": s3, "memory": s4, "llm_calls": backend.calls}
    armor = Armor(config, records, hierarchy, final, backend, memory)
    return armor, stats


def backend_from_config(config: ArmorConfig) -> Backend:
    """``scripted`` (registered scenario or scenario file) or ``remote``, optionally recorded."""
    spec = dict(config.backend)
    kind = spec.get("kind", "scripted")
    if kind == "scripted":
        if "scenario_file" in spec:
            backend: Backend = ScriptedBackend(Scenario.from_file(config.path("_", spec["scenario_file"])))
        else:
            import armor.synth  # noqa: F401  registers the oracle scenario

            backend = ScriptedBackend(spec.get("scenario", "oracle"))
    elif kind == "remote":
        backend = RemoteBackend(
            spec.get("endpoint"),
            model=spec.get("model", "default"),
            timeout=float(spec.get("timeout", 120.0)),
            max_in_flight=int(spec.get("max_in_flight", 4)),
        )
    else:
        raise ConfigError(f"unknown backend kind {kind!r}")
    if spec.get("record"):
        backend = RecordingBackend(backend, config.path("_", spec["record"]))
    return backend
