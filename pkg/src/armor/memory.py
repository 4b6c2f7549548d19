"""Tool-conflict memory: contrastive instances with LLM rationales, retrieved by fingerprint."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from armor.chem import (
    DEFAULT_NMAX,
    DEFAULT_WIDTH,
    Fingerprint,
    SimilarityIndex,
    fingerprint,
    load_fingerprints,
    save_fingerprints,
    top_k_similar,
)
from armor.domain import Dataset, Reaction
from armor.errors import ArmorError, AssetMissing
from armor.io import read_jsonl, write_jsonl
from armor.llm import Backend, LlmError, TemplateId, build_request, complete_json, memory_build_schema
from armor.patterns import CoverageJudge, Pattern, _keyed_rng, best_covering_patterns

log = logging.getLogger(__name__)

MAX_NEGATIVES = 3


class InvalidInstance(ArmorError):
    pass


@dataclass(frozen=True)
class ContrastiveInstance:
    idx: int
    pos_tool: str
    pos_pattern_id: str
    neg_tools: tuple[str, ...]
    neg_pattern_ids: tuple[str, ...]
    rationale: Mapping[str, Any] = field(hash=False)
    reactants: str = ""
    product: str = ""

    def to_json(self) -> dict:
        return {
            "idx": self.idx,
            "pos_tool": self.pos_tool,
            "pos_pattern_id": self.pos_pattern_id,
            "neg_tools": list(self.neg_tools),
            "neg_pattern_ids": list(self.neg_pattern_ids),
            "rationale": dict(self.rationale),
            "reactants": self.reactants,
            "product": self.product,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ContrastiveInstance":
        return cls(
            int(d["idx"]),
            d["pos_tool"],
            d["pos_pattern_id"],
            tuple(d["neg_tools"]),
            tuple(d["neg_pattern_ids"]),
            dict(d["rationale"]),
            d.get("reactants", ""),
            d.get("product", ""),
        )


def validate_instance(inst: ContrastiveInstance, dataset: Dataset | None = None) -> None:
    """Raise ``InvalidInstance`` unless every structural (and, given data, label) invariant holds."""
    if not 1 <= len(inst.neg_tools) <= MAX_NEGATIVES:
        raise InvalidInstance(f"idx={inst.idx}: {len(inst.neg_tools)} negatives")
    if len(inst.neg_pattern_ids) != len(inst.neg_tools):
        raise InvalidInstance(f"idx={inst.idx}: negative tools and patterns differ in length")
    if inst.pos_tool in inst.neg_tools or len(set(inst.neg_tools)) != len(inst.neg_tools):
        raise InvalidInstance(f"idx={inst.idx}: trusted tool repeated among negatives")
    rat = inst.rationale
    if not isinstance(rat, Mapping) or rat.get("tool") != inst.pos_tool:
        raise InvalidInstance(f"idx={inst.idx}: rationale does not name the trusted tool")
    elim = rat.get("elimination")
    if not isinstance(elim, list) or not all(isinstance(e, Mapping) and e.get("tool") in inst.neg_tools for e in elim):
        raise InvalidInstance(f"idx={inst.idx}: elimination names a tool outside the negatives")
    if not isinstance(rat.get("evidence"), list) or not isinstance(rat.get("final_reason"), str):
        raise InvalidInstance(f"idx={inst.idx}: rationale missing evidence or final_reason")
    if dataset is not None:
        if inst.idx not in dataset:
            raise InvalidInstance(f"idx={inst.idx}: reaction not in dataset")
        label = dataset[inst.idx].label
        if not dataset.prediction(inst.pos_tool, inst.idx).matches(label):
            raise InvalidInstance(f"idx={inst.idx}: trusted tool {inst.pos_tool} is not correct")
        for t in inst.neg_tools:
            if dataset.prediction(t, inst.idx).matches(label):
                raise InvalidInstance(f"idx={inst.idx}: negative tool {t} is correct")


class ConflictMemory:
    """Instances keyed by reaction idx plus a Hamming index over member reactions."""

    def __init__(
        self,
        instances: Mapping[int, Sequence[ContrastiveInstance]],
        fingerprints: Mapping[int, Fingerprint],
        width: int = DEFAULT_WIDTH,
        n_max: int = DEFAULT_NMAX,
    ):
        self.instances = {idx: list(v) for idx, v in sorted(instances.items()) if v}
        missing = set(self.instances) - set(fingerprints)
        if missing:
            raise InvalidInstance(f"no fingerprint for memory members {sorted(missing)[:5]}")
        self.fingerprints = {idx: fingerprints[idx] for idx in self.instances}
        self.width = width
        self.n_max = n_max
        self.index = SimilarityIndex(sorted(self.fingerprints.items()), width)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def n_instances(self) -> int:
        return sum(len(v) for v in self.instances.values())

    def all_instances(self) -> list[ContrastiveInstance]:
        return [inst for idx in sorted(self.instances) for inst in self.instances[idx]]

    def to_json(self) -> list[dict]:
        return [inst.to_json() for inst in self.all_instances()]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        write_jsonl(path, self.to_json())
        save_fingerprints(fingerprint_sidecar(path), self.fingerprints)

    @classmethod
    def load(
        cls,
        path: str | Path,
        dataset: Dataset | None = None,
        width: int = DEFAULT_WIDTH,
        n_max: int = DEFAULT_NMAX,
    ) -> tuple["ConflictMemory", dict]:
        """Reload and re-validate; corrupt instances are dropped and counted."""
        path = Path(path)
        if not path.exists():
            raise AssetMissing(path, "memory file")
        grouped: dict[int, list[ContrastiveInstance]] = {}
        dropped = 0
        for row in read_jsonl(path):
            try:
                inst = ContrastiveInstance.from_json(row)
                validate_instance(inst, dataset)
            except (InvalidInstance, KeyError, TypeError, ValueError) as exc:
                log.warning("dropping memory instance: %s", exc)
                dropped += 1
                continue
            grouped.setdefault(inst.idx, []).append(inst)
        sidecar = fingerprint_sidecar(path)
        fps = load_fingerprints(sidecar, width) if sidecar.exists() else {}
        for idx in list(grouped):
            if idx not in fps:
                if not grouped[idx][0].reactants:
                    dropped += len(grouped.pop(idx))
                    continue
                inst = grouped[idx][0]
                fps[idx] = fingerprint(Reaction(idx, inst.reactants, inst.product), width, n_max)
        mem = cls(grouped, fps, width, n_max)
        return mem, {"loaded": mem.n_instances, "dropped": dropped, "reactions": len(mem)}


def fingerprint_sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".fp.jsonl")


def format_candidates(cands: Sequence[Mapping[str, Any]]) -> str:
    """Render candidate tools with their predictions and matched rules."""
    lines = ["Candidate tools (each with its prediction and its best-matching rule):"]
    for c in cands:
        p: Pattern = c["pattern"]
        lines.append(f"- tool: \"{c['tool']}\"")
        lines.append(f"  tool_prediction: {c['prediction'].to_json()}")
        lines.append(f"  matched_rule: {p.name}")
        lines.append(f"  rule_explanation: {p.explanation}")
        if c.get("show_conf", True) and p.conf is not None:
            lines.append(f"  conf: {p.conf:.4f}")
    return "\n".join(lines)


def _instance_request(r: Reaction, pos: tuple[str, Pattern], negs: Sequence[tuple[str, Pattern]], dataset: Dataset):
    cands = sorted([pos, *negs], key=lambda tp: tp[0])
    neg_ids = [t for t, _ in negs]
    bindings = {
        "reactants": r.reactants,
        "product": r.product,
        "cands_section": format_candidates(
            [{"tool": t, "prediction": dataset.prediction(t, r.idx), "pattern": p} for t, p in cands]
        ),
        "gold_tool": pos[0],
        "neg_tools_json": json.dumps(neg_ids),
        "neg_str": ", ".join(f'"{t}"' for t in neg_ids),
    }
    context = {
        "idx": r.idx,
        "pos": pos[0],
        "negs": neg_ids,
        "patterns": {t: p.pattern_id for t, p in cands},
    }
    return build_request(TemplateId.MEMORY_BUILD, bindings, context=context, max_tokens=1024), neg_ids


def instances_for_reaction(
    r: Reaction,
    best: Mapping[str, Pattern],
    dataset: Dataset,
    backend: Backend,
    max_chars: int | None = None,
) -> list[ContrastiveInstance]:
    """One instance per correct covering tool, against up to three incorrect covering tools."""
    label = r.label
    correct = [t for t in sorted(best) if dataset.prediction(t, r.idx).matches(label)]
    wrong = [t for t in best if not dataset.prediction(t, r.idx).matches(label)]
    wrong.sort(key=lambda t: (-(best[t].conf or 0.0), t))
    negs = [(t, best[t]) for t in wrong[:MAX_NEGATIVES]]
    if not correct or not negs:
        return []
    out = []
    for pos_tool in correct:
        req, neg_ids = _instance_request(r, (pos_tool, best[pos_tool]), negs, dataset)
        try:
            rationale = complete_json(backend, req, memory_build_schema(pos_tool, neg_ids), max_chars)
        except LlmError as exc:
            log.warning("memory instance idx=%s pos=%s skipped: %s", r.idx, pos_tool, exc)
            continue
        inst = ContrastiveInstance(
            r.idx,
            pos_tool,
            best[pos_tool].pattern_id,
            tuple(neg_ids),
            tuple(best[t].pattern_id for t in neg_ids),
            rationale,
            r.reactants,
            r.product,
        )
        validate_instance(inst, dataset)
        out.append(inst)
    return out


def build_instances(
    pool: Iterable[int],
    final_patterns: Mapping[str, Sequence[Pattern]],
    dataset: Dataset,
    judge: CoverageJudge,
    backend: Backend,
    width: int = DEFAULT_WIDTH,
    n_max: int = DEFAULT_NMAX,
    precomputed: Mapping[int, Fingerprint] | None = None,
    workers: int = 1,
    max_chars: int | None = None,
) -> ConflictMemory:
    reactions = [dataset[i] for i in sorted(pool) if dataset[i].label is not None]
    judge.judge_many((p, r) for r in reactions for ps in final_patterns.values() for p in ps)

    def one(r: Reaction) -> list[ContrastiveInstance]:
        best = best_covering_patterns(r, final_patterns, judge)
        return instances_for_reaction(r, best, dataset, backend, max_chars)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, reactions))
    else:
        results = [one(r) for r in reactions]
    grouped = {r.idx: insts for r, insts in zip(reactions, results) if insts}
    fps = {}
    for idx in grouped:
        fp = precomputed.get(idx) if precomputed else None
        fps[idx] = fp if fp is not None else fingerprint(dataset[idx], width, n_max)
    return ConflictMemory(grouped, fps, width, n_max)


def retrieve_demonstrations(
    memory: ConflictMemory | None,
    r: Reaction,
    k: int = 8,
    seed: int = 0,
    query_fp: Fingerprint | None = None,
) -> list[ContrastiveInstance]:
    """One instance from each of the ``k`` nearest member reactions.

    The per-member choice uses an RNG keyed on ``(seed, r.idx, member idx)``.
    """
    if memory is None or len(memory) == 0:
        return []
    q = query_fp if query_fp is not None else fingerprint(r, memory.width, memory.n_max)
    demos = []
    for member, _dist in top_k_similar(memory.index, q, k):
        options = memory.instances[member]
        rng = _keyed_rng(seed, r.idx, member)
        demos.append(options[rng.randrange(len(options))])
    return demos
