"""Utility patterns: mining, scoring and per-reaction tool selection.

Lifecycle per tool: diagnostic subsets of the first-level disagreement pool
-> LLM extraction (Raw) -> Align/Cov gate (Refined) -> same-name
consolidation (Consolidated) -> Conf over the whole pool, top-5 (Final).
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from armor.domain import Dataset, Label, Prediction, Reaction
from armor.errors import ArmorError, AssetMissing
from armor.io import read_jsonl, write_json, write_jsonl
from armor.llm import (
    Backend,
    LlmError,
    TemplateId,
    build_request,
    complete_json,
    consolidation_schema,
    pattern_extraction_schema,
    pattern_match_schema,
)

log = logging.getLogger(__name__)

EXAMPLES_PER_PATTERN = 5
MAX_FINAL_PER_TOOL = 5
CELLS = ("r11", "r10", "r01", "r00")


class PatternStatus(str, enum.Enum):
    RAW = "Raw"
    REFINED = "Refined"
    CONSOLIDATED = "Consolidated"
    FINAL = "Final"

    @property
    def rank(self) -> int:
        return list(PatternStatus).index(self)


@dataclass(frozen=True)
class Pattern:
    pattern_id: str
    tool_id: str
    name: str
    explanation: str
    example_idxs: tuple[int, ...]
    align: float | None = None
    cov: float | None = None
    conf: float | None = None
    status: PatternStatus = PatternStatus.RAW
    n_covered: int | None = None

    def __post_init__(self) -> None:
        if len(self.example_idxs) != EXAMPLES_PER_PATTERN:
            raise ValueError(f"pattern {self.pattern_id} needs exactly {EXAMPLES_PER_PATTERN} examples")

    def to_json(self) -> dict:
        d = asdict(self)
        d["example_idxs"] = list(self.example_idxs)
        d["status"] = self.status.value
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "Pattern":
        d = dict(d)
        d["example_idxs"] = tuple(d["example_idxs"])
        d["status"] = PatternStatus(d.get("status", "Raw"))
        return cls(**d)


class EmptyT1(ArmorError):
    pass


class InsufficientCell(ArmorError):
    def __init__(self, cell: str, have: int, need: int):
        super().__init__(f"cell {cell} has {have} reactions, need {need}")
        self.cell, self.have, self.need = cell, have, need


class MissingExample(ArmorError):
    def __init__(self, idx: int):
        super().__init__(f"example idx {idx} not found in dataset (or unlabeled)")
        self.idx = idx


class NoCoveredReactions(ArmorError):
    pass


# --- disagreement pool and diagnostic subsets --------------------------------


def disagreement_set(dataset: Dataset, t1_tools: Sequence[str]) -> set[int]:
    """Reactions on which the first-level tools are not unanimous on a non-NA value."""
    if not t1_tools:
        raise EmptyT1("first-level tool set is empty")
    out = set()
    for r in dataset:
        preds = {dataset.prediction(t, r.idx) for t in t1_tools}
        if len(preds) != 1 or Prediction.NA in preds:
            out.add(r.idx)
    return out


def cell_of(label: Label, pred: Prediction) -> str:
    """``r{label}{pred}``; NA falls into the wrong-prediction cell for its label."""
    if pred is Prediction.NA:
        return f"r{int(label)}{1 - int(label)}"
    return f"r{int(label)}{pred.value}"


def diagnostic_cells(dataset: Dataset, tool_id: str, pool: Iterable[int]) -> dict[str, list[int]]:
    cells: dict[str, list[int]] = {c: [] for c in CELLS}
    for idx in sorted(pool):
        r = dataset[idx]
        if r.label is None:
            continue
        cells[cell_of(r.label, dataset.prediction(tool_id, idx))].append(idx)
    return cells


@dataclass(frozen=True)
class DiagnosticSubset:
    tool_id: str
    subset_no: int
    n: int
    cells: Mapping[str, tuple[int, ...]]

    @property
    def idxs(self) -> list[int]:
        return sorted(i for c in CELLS for i in self.cells[c])


def _keyed_rng(*parts: object) -> random.Random:
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return random.Random(int.from_bytes(hashlib.sha256(key).digest()[:8], "big"))


def sample_diagnostic_subsets(
    dataset: Dataset,
    tool_id: str,
    pool: Iterable[int],
    m_total: int = 100,
    n_schedule: Sequence[int] = (5, 10, 25, 45),
    seed: int = 0,
) -> tuple[list[DiagnosticSubset], list[InsufficientCell]]:
    """Draw ``m_total`` 4-cell subsets; subset ``m`` uses ``n_schedule[(m - 1) % len]`` per cell.

    Each subset depends only on ``(seed, tool_id, m)``. Subsets whose cells are
    too small are skipped and reported in the second return value.
    """
    cells = diagnostic_cells(dataset, tool_id, pool)
    subsets, skipped = [], []
    for m in range(1, m_total + 1):
        n = n_schedule[(m - 1) % len(n_schedule)]
        short = [c for c in CELLS if len(cells[c]) < n]
        if short:
            c = short[0]
            warn = InsufficientCell(c, len(cells[c]), n)
            log.warning("tool %s subset %d skipped: %s", tool_id, m, warn)
            skipped.append(warn)
            continue
        rng = _keyed_rng(seed, tool_id, m)
        picked = {c: tuple(sorted(rng.sample(cells[c], n))) for c in CELLS}
        subsets.append(DiagnosticSubset(tool_id, m, n, picked))
    return subsets, skipped


def serialize_subset(dataset: Dataset, subset: DiagnosticSubset) -> str:
    lines = []
    for idx in subset.idxs:
        r = dataset[idx]
        rec = {
            "idx": idx,
            "reactants": r.reactants,
            "product": r.product,
            "label": int(r.label),
            "prediction": dataset.prediction(subset.tool_id, idx).to_json(),
        }
        lines.append(json.dumps(rec, ensure_ascii=False))
    return "\n".join(lines)


def _subset_accuracy(dataset: Dataset, subset: DiagnosticSubset) -> float:
    idxs = subset.idxs
    return sum(dataset.correct(subset.tool_id, i) for i in idxs) / len(idxs)


def extract_patterns(
    tool_id: str,
    subset: DiagnosticSubset,
    dataset: Dataset,
    backend: Backend,
    max_chars: int | None = None,
) -> list[Pattern]:
    members = set(subset.idxs)
    req = build_request(
        TemplateId.PATTERN_EXTRACTION,
        {"dataset_text": serialize_subset(dataset, subset)},
        context={"tool_id": tool_id, "subset_no": subset.subset_no},
        max_tokens=4096,
    )
    try:
        out = complete_json(backend, req, pattern_extraction_schema(), max_chars)
    except LlmError as exc:
        log.warning("extraction for %s subset %d skipped: %s", tool_id, subset.subset_no, exc)
        return []

    reported = out.get("tool_acc")
    if reported is not None:
        try:
            local = 100 * _subset_accuracy(dataset, subset)
            if abs(float(str(reported).strip().rstrip("%")) - local) > 1.0:
                log.info("tool %s subset %d: reported tool_acc %s vs local %.2f", tool_id, subset.subset_no, reported, local)
        except ValueError:
            log.info("tool %s subset %d: unparseable tool_acc %r", tool_id, subset.subset_no, reported)

    patterns = []
    for j, entry in enumerate(out["often_correct_on"]):
        if not isinstance(entry, dict):
            log.warning("dropping non-object pattern entry in %s subset %d", tool_id, subset.subset_no)
            continue
        name, expl, ex = entry.get("name"), entry.get("explanation"), entry.get("examples_idx")
        if not (isinstance(name, str) and name.strip() and isinstance(expl, str) and isinstance(ex, list)):
            log.warning("dropping malformed pattern entry %d in %s subset %d", j, tool_id, subset.subset_no)
            continue
        if (
            len(ex) != EXAMPLES_PER_PATTERN
            or not all(isinstance(i, int) and not isinstance(i, bool) for i in ex)
            or len(set(ex)) != EXAMPLES_PER_PATTERN
            or not set(ex) <= members
        ):
            log.warning("dropping pattern %r of %s subset %d: examples_idx %r invalid", name, tool_id, subset.subset_no, ex)
            continue
        patterns.append(
            Pattern(
                f"{tool_id}-m{subset.subset_no:03d}-{j}",
                tool_id,
                name.strip(),
                expl,
                tuple(ex),
            )
        )
    return patterns


# --- coverage judging ---------------------------------------------------------


@dataclass(frozen=True)
class CoverageJudgment:
    covered: bool
    confidence: str


class CoverageCache:
    """Append-only ``(pattern_id, idx) -> judgment`` map; first writer wins."""

    def __init__(self, entries: Mapping[tuple[str, int], CoverageJudgment] | None = None):
        self._entries: dict[tuple[str, int], CoverageJudgment] = dict(entries or {})
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: object) -> bool:
        return key in self._entries

    def get(self, pattern_id: str, idx: int) -> CoverageJudgment | None:
        return self._entries.get((pattern_id, idx))

    def put(self, pattern_id: str, idx: int, judgment: CoverageJudgment) -> CoverageJudgment:
        with self._lock:
            return self._entries.setdefault((pattern_id, idx), judgment)

    def items(self):
        return sorted(self._entries.items())

    def to_rows(self) -> list[dict]:
        return [
            {"pattern_id": pid, "idx": idx, "covered": j.covered, "confidence": j.confidence}
            for (pid, idx), j in self.items()
        ]

    def save(self, path: str | Path) -> None:
        write_jsonl(path, self.to_rows())

    @classmethod
    def load(cls, path: str | Path) -> "CoverageCache":
        path = Path(path)
        if not path.exists():
            return cls()
        return cls(
            {(row["pattern_id"], int(row["idx"])): CoverageJudgment(bool(row["covered"]), row["confidence"]) for row in read_jsonl(path)}
        )


class CoverageJudge:
    """Decides pattern coverage through the PatternMatch prompt, memoized in a cache."""

    def __init__(self, backend: Backend, cache: CoverageCache | None = None, workers: int = 1, max_chars: int | None = None):
        self.backend = backend
        self.cache = cache if cache is not None else CoverageCache()
        self.workers = workers
        self.max_chars = max_chars
        self.failures = 0

    def __call__(self, pattern: Pattern, r: Reaction) -> bool:
        return self.judge(pattern, r)

    def judge(self, pattern: Pattern, r: Reaction) -> bool:
        cached = self.cache.get(pattern.pattern_id, r.idx)
        if cached is not None:
            self.cache.hits += 1
            return cached.covered
        self.cache.misses += 1
        example = {"idx": r.idx, "reactants": r.reactants, "product": r.product}
        req = build_request(
            TemplateId.PATTERN_MATCH,
            {
                "rule_name": json.dumps(pattern.name, ensure_ascii=False),
                "rule_explanation": json.dumps(pattern.explanation, ensure_ascii=False),
                "example_json": json.dumps(example, indent=2, ensure_ascii=False),
            },
            context={"pattern_id": pattern.pattern_id, "tool_id": pattern.tool_id, "idx": r.idx},
            max_tokens=256,
        )
        try:
            out = complete_json(self.backend, req, pattern_match_schema(), self.max_chars)
            judgment = CoverageJudgment(out["belongs_to_rule"], out["confidence"])
        except LlmError as exc:
            self.failures += 1
            log.warning("coverage judge failed for %s on idx=%s, treating as not covered: %s", pattern.pattern_id, r.idx, exc)
            judgment = CoverageJudgment(False, "low")
        return self.cache.put(pattern.pattern_id, r.idx, judgment).covered

    def judge_many(self, pairs: Iterable[tuple[Pattern, Reaction]]) -> None:
        """Fill the cache for all pairs; returns once every judgment is stored."""
        todo = [(p, r) for p, r in pairs if (p.pattern_id, r.idx) not in self.cache]
        if self.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                list(pool.map(lambda pr: self.judge(*pr), todo))
        else:
            for p, r in todo:
                self.judge(p, r)


def judge_coverage(pattern: Pattern, r: Reaction, judge: CoverageJudge) -> bool:
    return judge.judge(pattern, r)


# --- scores -------------------------------------------------------------------


def _examples(pattern: Pattern, dataset: Dataset) -> list[Reaction]:
    out = []
    for idx in pattern.example_idxs:
        if idx not in dataset or dataset[idx].label is None:
            raise MissingExample(idx)
        out.append(dataset[idx])
    return out


def align_score(pattern: Pattern, dataset: Dataset) -> float:
    """Share of the pattern's examples its tool predicts correctly (NA is wrong)."""
    ex = _examples(pattern, dataset)
    return sum(dataset.correct(pattern.tool_id, r.idx) for r in ex) / len(ex)


def cov_score(pattern: Pattern, dataset: Dataset, judge: CoverageJudge) -> float:
    ex = _examples(pattern, dataset)
    judge.judge_many((pattern, r) for r in ex)
    return sum(judge.judge(pattern, r) for r in ex) / len(ex)


def refine_patterns(
    raw: Iterable[Pattern],
    dataset: Dataset,
    judge: CoverageJudge,
    tau1: float = 1.0,
    tau2: float = 1.0,
) -> list[Pattern]:
    """Keep patterns with ``align >= tau1`` and ``cov >= tau2``.

    Coverage is only judged for patterns that pass the align gate.
    """
    kept = []
    for p in raw:
        align = align_score(p, dataset)
        if align < tau1:
            continue
        cov = cov_score(p, dataset, judge)
        if cov >= tau2:
            kept.append(replace(p, align=align, cov=cov, status=PatternStatus.REFINED))
    return kept


def _fallback_survivor(group: Sequence[Pattern]) -> Pattern:
    return min(group, key=lambda p: (-(p.align or 0.0), p.pattern_id))


def consolidate_patterns(
    refined: Iterable[Pattern],
    tool_id: str,
    backend: Backend,
    max_chars: int | None = None,
) -> list[Pattern]:
    """One survivor per exact name; the LLM picks among same-name candidates."""
    groups: dict[str, list[Pattern]] = {}
    for p in refined:
        if p.tool_id == tool_id:
            groups.setdefault(p.name, []).append(p)
    survivors = []
    for name, group in groups.items():
        group = sorted(group, key=lambda p: p.pattern_id)
        if len(group) == 1:
            survivor = group[0]
        else:
            candidates = [
                {"index": i, "name": p.name, "explanation": p.explanation} for i, p in enumerate(group)
            ]
            req = build_request(
                TemplateId.CONSOLIDATION,
                {
                    "n_rules": str(len(group)),
                    "rule_name": name,
                    "candidates_json": json.dumps(candidates, indent=2, ensure_ascii=False),
                },
                context={"tool_id": tool_id, "pattern_ids": [p.pattern_id for p in group]},
                max_tokens=256,
            )
            try:
                keep = complete_json(backend, req, consolidation_schema(), max_chars)["keep_index"]
            except LlmError as exc:
                log.warning("consolidation of %r for %s failed, using fallback: %s", name, tool_id, exc)
                keep = -1
            if 0 <= keep < len(group):
                survivor = group[keep]
            else:
                if keep != -1:
                    log.warning("keep_index %s out of range for %r (%d rules); using fallback", keep, name, len(group))
                survivor = _fallback_survivor(group)
        survivors.append(replace(survivor, status=PatternStatus.CONSOLIDATED))
    return survivors


def conf_score(pattern: Pattern, pool: Iterable[int], dataset: Dataset, judge: CoverageJudge) -> tuple[float, int]:
    """``(conf, n_covered)``: correctness rate of the tool on pool reactions the pattern covers."""
    reactions = [dataset[i] for i in sorted(pool)]
    judge.judge_many((pattern, r) for r in reactions)
    covered = [r for r in reactions if judge.judge(pattern, r)]
    if not covered:
        raise NoCoveredReactions(f"pattern {pattern.pattern_id} covers no pool reaction")
    correct = sum(dataset.correct(pattern.tool_id, r.idx) for r in covered)
    return correct / len(covered), len(covered)


def score_confidence(patterns: Iterable[Pattern], pool: Iterable[int], dataset: Dataset, judge: CoverageJudge) -> list[Pattern]:
    pool = sorted(pool)
    out = []
    for p in patterns:
        try:
            conf, n = conf_score(p, pool, dataset, judge)
        except NoCoveredReactions as exc:
            log.info("dropping %s", exc)
            continue
        out.append(replace(p, conf=conf, n_covered=n))
    return out


def _final_order(p: Pattern) -> tuple:
    return (-(p.conf or 0.0), -(p.n_covered or 0), p.pattern_id)


def finalize_pattern_set(consolidated: Iterable[Pattern], tau3: float = 0.5) -> dict[str, list[Pattern]]:
    """Per tool: ``conf >= tau3``, sorted by conf (then coverage, then id), at most five."""
    by_tool: dict[str, list[Pattern]] = {}
    for p in consolidated:
        if p.conf is None or p.conf < tau3:
            continue
        by_tool.setdefault(p.tool_id, []).append(p)
    return {
        tool: [replace(p, status=PatternStatus.FINAL) for p in sorted(ps, key=_final_order)[:MAX_FINAL_PER_TOOL]]
        for tool, ps in sorted(by_tool.items())
    }


# --- selection ----------------------------------------------------------------


def best_covering_patterns(
    r: Reaction, final_patterns: Mapping[str, Sequence[Pattern]], judge: CoverageJudge
) -> dict[str, Pattern]:
    """For every tool, its most confident Final pattern covering ``r`` (if any)."""
    out = {}
    for tool_id in sorted(final_patterns):
        for p in sorted(final_patterns[tool_id], key=_final_order):
            if judge.judge(p, r):
                out[tool_id] = p
                break
    return out


def select_tools(
    r: Reaction,
    final_patterns: Mapping[str, Sequence[Pattern]],
    judge: CoverageJudge,
    top_l: int = 5,
    val_accuracy: Mapping[str, float] | None = None,
) -> list[tuple[str, Pattern]]:
    val_accuracy = val_accuracy or {}
    best = best_covering_patterns(r, final_patterns, judge)
    ranked = sorted(best.items(), key=lambda kv: (-(kv[1].conf or 0.0), -val_accuracy.get(kv[0], 0.0), kv[0]))
    return ranked[:top_l]


# --- persistence --------------------------------------------------------------


def save_pattern_store(path: str | Path, patterns: Mapping[str, Sequence[Pattern]] | Iterable[Pattern]) -> None:
    if not isinstance(patterns, Mapping):
        grouped: dict[str, list[Pattern]] = {}
        for p in patterns:
            grouped.setdefault(p.tool_id, []).append(p)
        patterns = grouped
    write_json(path, {tool: [p.to_json() for p in ps] for tool, ps in sorted(patterns.items())})


def load_pattern_store(path: str | Path) -> dict[str, list[Pattern]]:
    path = Path(path)
    if not path.exists():
        raise AssetMissing(path, "pattern store")
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {tool: [Pattern.from_json(d) for d in ps] for tool, ps in raw.items()}


def flatten(store: Mapping[str, Sequence[Pattern]]) -> list[Pattern]:
    return [p for tool in sorted(store) for p in store[tool]]
