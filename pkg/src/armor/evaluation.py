"""Metrics, voting baselines and the category / tool-usage breakdowns."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from armor.domain import Dataset, Label, Prediction
from armor.errors import ArmorError

log = logging.getLogger(__name__)

CATEGORIES = ("T1", "Ts", "Conflict")


class EmptyInput(ArmorError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    """Feasible is the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self) -> "ConfusionCounts":
        return ConfusionCounts(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


def confusion_counts(pairs: Iterable[tuple[Label, Label]]) -> ConfusionCounts:
    """Count ``(gold, predicted)`` pairs."""
    tp = fp = tn = fn = 0
    for gold, pred in pairs:
        if gold == Label.FEASIBLE:
            if pred == Label.FEASIBLE:
                tp += 1
            else:
                fn += 1
        elif pred == Label.FEASIBLE:
            fp += 1
        else:
            tn += 1
    c = ConfusionCounts(tp, fp, tn, fn)
    if c.total == 0:
        raise EmptyInput("no (gold, predicted) pairs")
    return c


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def accuracy_metrics(c: ConfusionCounts) -> dict[str, float | None]:
    return {
        "overall": _ratio(c.tp + c.tn, c.total),
        "feasible": _ratio(c.tp, c.tp + c.fn),
        "infeasible": _ratio(c.tn, c.tn + c.fp),
    }


def _f1(tp: int, fp: int, fn: int) -> float | None:
    if tp + fp == 0 or tp + fn == 0:
        return None
    # 2PR/(P+R) reduced to one division, so the result is correctly rounded
    return 2 * tp / (2 * tp + fp + fn)


def f1_per_class(c: ConfusionCounts) -> dict[str, float | None]:
    return {
        "f1_feasible": _f1(c.tp, c.fp, c.fn),
        "f1_infeasible": _f1(c.tn, c.fn, c.fp),
    }


def mcc(c: ConfusionCounts) -> float:
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        log.info("MCC denominator is zero (tp=%d fp=%d tn=%d fn=%d); reporting 0", c.tp, c.fp, c.tn, c.fn)
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)


def classification_metrics(pairs: Sequence[tuple[Label, Label]]) -> dict[str, float | None]:
    c = confusion_counts(pairs)
    acc = accuracy_metrics(c)
    f1 = f1_per_class(c)
    return {
        "acc_overall": acc["overall"],
        "acc_feasible": acc["feasible"],
        "acc_infeasible": acc["infeasible"],
        "f1_feasible": f1["f1_feasible"],
        "f1_infeasible": f1["f1_infeasible"],
        "mcc": mcc(c),
        "confusion": {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn},
    }


def oracle_upper_bound(dataset: Dataset, tool_ids: Sequence[str] | None = None) -> float:
    """Fraction of reactions that at least one tool gets right."""
    if len(dataset) == 0:
        raise EmptyInput("empty dataset")
    tools = list(tool_ids) if tool_ids is not None else dataset.tool_ids
    hit = sum(1 for r in dataset if any(dataset.correct(t, r.idx) for t in tools))
    return hit / len(dataset)


def majority_vote(predictions: Sequence[Prediction], weights: Sequence[float] | None = None) -> Label:
    """Unweighted or weighted vote over non-NA predictions; ties and all-NA give Infeasible."""
    if weights is None:
        weights = [1.0] * len(predictions)
    if len(weights) != len(predictions):
        raise ValueError("weights and predictions differ in length")
    pos = neg = 0.0
    for p, w in zip(predictions, weights):
        if p is Prediction.PRED1:
            pos += w
        elif p is Prediction.PRED0:
            neg += w
    return Label.FEASIBLE if pos > neg else Label.INFEASIBLE


def voting_baselines(dataset: Dataset, val_accuracy: Mapping[str, float] | None = None) -> dict:
    """Single-tool, majority and weighted-voting accuracy, plus the oracle bound."""
    tools = dataset.tool_ids
    golds = [r.label for r in dataset]
    out: dict = {"single_tool": {}}
    for t in tools:
        pairs = [(r.label, dataset.prediction(t, r.idx).as_label()) for r in dataset]
        # NA counts as wrong: map it to the opposite of gold
        pairs = [(g, p if p is not None else Label(1 - g)) for g, p in pairs]
        out["single_tool"][t] = classification_metrics(pairs)
    maj = [majority_vote([dataset.prediction(t, r.idx) for t in tools]) for r in dataset]
    out["majority_vote"] = classification_metrics(list(zip(golds, maj)))
    if val_accuracy:
        w = [val_accuracy.get(t, 0.0) for t in tools]
        wv = [majority_vote([dataset.prediction(t, r.idx) for t in tools], w) for r in dataset]
        out["weighted_vote"] = classification_metrics(list(zip(golds, wv)))
    out["oracle_upper_bound"] = oracle_upper_bound(dataset, tools)
    return out


def category_of(stage: str) -> str:
    if stage == "T1Consensus":
        return "T1"
    if stage == "TsConsensus":
        return "Ts"
    return "Conflict"


def category_breakdown(traces: Sequence[Mapping]) -> dict[str, dict]:
    """Partition traces into T1 / Ts / Conflict with count, percentage and accuracy."""
    total = len(traces)
    out = {}
    for cat in CATEGORIES:
        members = [t for t in traces if category_of(t["stage"]) == cat]
        labeled = [t for t in members if t.get("gold") is not None]
        correct = sum(1 for t in labeled if t["final"] == t["gold"])
        out[cat] = {
            "count": len(members),
            "proportion": 100.0 * len(members) / total if total else 0.0,
            "acc": correct / len(labeled) if labeled else None,
        }
    return out


def tool_usage_report(
    traces: Sequence[Mapping],
    full_accuracy: Mapping[str, float],
    levels: Mapping[str, str] | None = None,
) -> dict:
    """How often each tool was picked by the conflict resolver, and how well it did there."""
    levels = levels or {}
    conflict = [t for t in traces if category_of(t["stage"]) == "Conflict"]
    n_conflict = len(conflict)
    tools: dict[str, dict] = {}
    for tool_id in sorted(set(full_accuracy) | {t["chosen_tool"] for t in conflict if t.get("chosen_tool")}):
        chosen = [t for t in conflict if t.get("chosen_tool") == tool_id]
        labeled = [t for t in chosen if t.get("gold") is not None]
        sel_acc = sum(t["final"] == t["gold"] for t in labeled) / len(labeled) if labeled else None
        full = full_accuracy.get(tool_id)
        trend = None
        if sel_acc is not None and full is not None:
            trend = "up" if sel_acc > full else "down"
        tools[tool_id] = {
            "level": levels.get(tool_id),
            "selected_count": len(chosen),
            "proportion": 100.0 * len(chosen) / n_conflict if n_conflict else 0.0,
            "selected_acc": sel_acc,
            "full_acc": full,
            "trend": trend,
        }
    failures = [t for t in conflict if t["stage"] in ("FallbackDirect", "FallbackMajority")]
    return {
        "conflict_count": n_conflict,
        "tools": tools,
        "failure": {
            "count": len(failures),
            "proportion": 100.0 * len(failures) / n_conflict if n_conflict else 0.0,
        },
    }


def _pct(v: float | None) -> str:
    return "--" if v is None else f"{100 * v:6.2f}"


def render_tables(report: Mapping, evaluation: Mapping | None = None) -> str:
    """Plain-text overall / category / tool-usage tables."""
    lines = []
    m = report.get("metrics")
    rows = []
    if evaluation:
        for name, met in sorted(evaluation.get("single_tool", {}).items()):
            rows.append((name, met))
        for name in ("majority_vote", "weighted_vote"):
            if name in evaluation:
                rows.append((name, evaluation[name]))
    if m:
        rows.append(("armor", m))
    if rows:
        lines.append("Overall results (ACC %, F1 %, MCC)")
        lines.append(f"{'Method':<24}{'Overall':>9}{'Feas.':>9}{'Infeas.':>9}{'F1 F':>9}{'F1 I':>9}{'MCC':>9}")
        for name, met in rows:
            lines.append(
                f"{name:<24}{_pct(met['acc_overall']):>9}{_pct(met['acc_feasible']):>9}{_pct(met['acc_infeasible']):>9}"
                f"{_pct(met['f1_feasible']):>9}{_pct(met['f1_infeasible']):>9}{met['mcc']:>9.4f}"
            )
        if evaluation and "oracle_upper_bound" in evaluation:
            lines.append(f"{'upper_bound':<24}{_pct(evaluation['oracle_upper_bound']):>9}")
        lines.append("")
    cats = report.get("categories")
    if cats:
        lines.append("Reaction categories")
        lines.append(f"{'Category':<12}{'N':>8}{'Prop. %':>10}{'ACC %':>9}")
        total = 0
        for cat in CATEGORIES:
            c = cats[cat]
            total += c["count"]
            lines.append(f"{cat:<12}{c['count']:>8}{c['proportion']:>10.2f}{_pct(c['acc']):>9}")
        overall = m["acc_overall"] if m else None
        lines.append(f"{'Total':<12}{total:>8}{100.0 if total else 0.0:>10.2f}{_pct(overall):>9}")
        lines.append("")
    usage = report.get("tool_usage")
    if usage:
        lines.append(f"Tool selection on the conflict set (n={usage['conflict_count']})")
        lines.append(f"{'Tool':<16}{'Level':>6}{'Prop. %':>9}{'Count':>7}{'ACC %':>9}{'Full %':>9}  Trend")
        ordered = sorted(usage["tools"].items(), key=lambda kv: (-kv[1]["selected_count"], kv[0]))
        for tool, u in ordered:
            arrow = {"up": "↗", "down": "↘"}.get(u["trend"], "")
            lines.append(
                f"{tool:<16}{u['level'] or '':>6}{u['proportion']:>9.2f}{u['selected_count']:>7}"
                f"{_pct(u['selected_acc']):>9}{_pct(u['full_acc']):>9}  {arrow}"
            )
        f = usage["failure"]
        lines.append(f"{'Failure':<16}{'/':>6}{f['proportion']:>9.2f}{f['count']:>7}")
    return "\n".join(lines).rstrip() + "\n"
