"""Synthetic region-structured corpus and the ``oracle`` scripted LLM scenario.

Every reaction belongs to a latent region that is recoverable from a
region-specific reagent among its reactants. Tools get engineered per-region
accuracies: a few independent generalists, one strong specialist per region,
two correlated semi-specialists per region, and weak correlated tools
elsewhere. The oracle scenario answers prompts by reading the SMILES the way a
chemist would read the reagent, so coverage judgments are truthful.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from armor.domain import Dataset, Label, Prediction, Reaction, Split, dump_dataset
from armor.errors import ConfigError
from armor.io import atomic_write_text, write_json
from armor.llm import LlmRequest, Scenario, register_scenario
from armor.tools import save_prediction_table

GENERALIST_ACC = (0.86, 0.85, 0.84)
STRONG_ACC = 0.95
SEMI_ACC = 0.75
WEAK_ACC = 0.55
JITTER = 0.1


@dataclass(frozen=True)
class Region:
    name: str
    reagent: str
    suffix: str
    rule: str
    explanation: str


REGIONS = (
    Region("acyl_chloride", "O=C(Cl)C(=O)Cl", "C(=O)Cl", "Acid activation with oxalyl chloride",
           "Carboxylic acids treated with oxalyl chloride O=C(Cl)C(=O)Cl to give acyl chlorides."),
    Region("suzuki", "OB(O)c1ccccc1", "c2ccccc2", "Suzuki arylation with phenylboronic acid",
           "Aryl couplings where phenylboronic acid OB(O)c1ccccc1 is among the reactants."),
    Region("borohydride", "[BH4-]", "CO", "Borohydride reductions",
           "Carbonyl reductions run with borohydride [BH4-] as the hydride source."),
    Region("boc", "CC(C)(C)OC(=O)OC(=O)OC(C)(C)C", "NC(=O)OC(C)(C)C", "Boc protection with Boc anhydride",
           "Amine protections using di-tert-butyl dicarbonate CC(C)(C)OC(=O)OC(=O)OC(C)(C)C."),
    Region("nitration", "O=[N+]([O-])O", "[N+](=O)[O-]", "Nitration with nitric acid",
           "Electrophilic nitrations where nitric acid O=[N+]([O-])O is present."),
    Region("bromination", "O=C1CCC(=O)N1Br", "Br", "Radical bromination with NBS",
           "Brominations using N-bromosuccinimide O=C1CCC(=O)N1Br."),
    Region("mesylation", "CS(=O)(=O)Cl", "OS(C)(=O)=O", "Alcohol mesylation",
           "Alcohols activated with methanesulfonyl chloride CS(=O)(=O)Cl."),
    Region("lithiation", "[Li]CCCC", "[Li]", "Lithiation with n-butyllithium",
           "Metalations driven by n-butyllithium [Li]CCCC."),
    Region("epoxidation", "O=C(OO)c1cccc(Cl)c1", "C1OC1", "Peracid epoxidation",
           "Alkene epoxidations with mCPBA O=C(OO)c1cccc(Cl)c1."),
    Region("wittig", "C=P(c1ccccc1)(c1ccccc1)c1ccccc1", "C=C", "Wittig olefination",
           "Olefinations with the methylene ylide C=P(c1ccccc1)(c1ccccc1)c1ccccc1."),
)
MAX_REGIONS = len(REGIONS)
_BY_REAGENT = {reg.reagent: k for k, reg in enumerate(REGIONS)}
_BY_RULE = {reg.rule: k for k, reg in enumerate(REGIONS)}

BROAD_RULE = "Broad substrate scope"
BROAD_EXPLANATION = "Any organic transformation with ordinary reagents."

_FRAGMENTS = ("C", "CC", "CCC", "C(C)C", "c1ccccc1", "c1ccncc1", "C1CCCCC1", "CO", "CN", "C(F)(F)F", "c1ccc(Cl)cc1", "CC#N", "OC")


class SpecInvalid(ConfigError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    tools: int = 13
    regions: int = 6
    size: int = 2000
    seed: int = 1
    noise: float = 0.0
    na_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.tools < 3:
            raise SpecInvalid(f"need at least 3 tools, got {self.tools}")
        if not 2 <= self.regions <= MAX_REGIONS:
            raise SpecInvalid(f"regions must lie in [2, {MAX_REGIONS}], got {self.regions}")
        if self.size < 20 * self.regions:
            raise SpecInvalid(f"size {self.size} too small for {self.regions} regions (need >= {20 * self.regions})")
        if not 0.0 <= self.noise <= 0.5 or not 0.0 <= self.na_rate < 1.0:
            raise SpecInvalid("noise must lie in [0, 0.5] and na_rate in [0, 1)")


@dataclass
class SynthCorpus:
    spec: SynthSpec
    validation: Dataset
    test: Dataset
    tool_ids: list[str]
    profiles: dict[str, list[float]]
    region_of: dict[int, int]
    measured: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def ground_truth(self) -> dict[str, Any]:
        return {
            "spec": self.spec.__dict__,
            "regions": [REGIONS[k].__dict__ for k in range(self.spec.regions)],
            "profiles": self.profiles,
            "measured": self.measured,
            "region_of": {str(i): k for i, k in sorted(self.region_of.items())},
        }


def region_of_reactants(reactants: str) -> int | None:
    for part in reactants.split("."):
        if part in _BY_REAGENT:
            return _BY_REAGENT[part]
    return None


def tool_names(n_tools: int) -> list[str]:
    return [f"gen_{i + 1}" for i in range(3)] + [f"spec_{i + 1:02d}" for i in range(n_tools - 3)]


def tool_profiles(n_tools: int, n_regions: int) -> dict[str, list[float]]:
    """Per-tool accuracy for each region."""
    names = tool_names(n_tools)
    prof = {t: [WEAK_ACC] * n_regions for t in names}
    for g, acc in zip(names[:3], GENERALIST_ACC):
        prof[g] = [acc] * n_regions
    specs = names[3:]
    for k in range(n_regions):
        if not specs:
            break
        for offset, acc in ((0, STRONG_ACC), (1, SEMI_ACC), (2, SEMI_ACC)):
            if offset >= len(specs):
                break
            t = specs[(k + offset) % len(specs)]
            prof[t][k] = max(prof[t][k], acc)
    return prof


def _correlated(profile_acc: float) -> bool:
    return profile_acc not in GENERALIST_ACC and profile_acc != STRONG_ACC


def _reaction(rng: random.Random, idx: int, k: int, label: Label, n_regions: int) -> Reaction:
    reg = REGIONS[k]
    core = "".join(rng.choice(_FRAGMENTS) for _ in range(rng.randint(2, 4)))
    if label is Label.FEASIBLE:
        suffix = reg.suffix
    else:
        suffix = REGIONS[(k + rng.randint(1, n_regions - 1)) % n_regions].suffix
    return Reaction(idx, f"{core}C(=O)O.{reg.reagent}", f"{core}{suffix}", label)


def generate(spec: SynthSpec) -> SynthCorpus:
    """Build the corpus; with ``noise == 0`` per-region accuracies are exact by construction."""
    rng = random.Random(spec.seed)
    names = tool_names(spec.tools)
    prof = tool_profiles(spec.tools, spec.regions)
    n_val = spec.size // 2
    splits = {Split.VALIDATION: range(0, n_val), Split.TEST: range(n_val, spec.size)}

    region_of: dict[int, int] = {}
    datasets = {}
    for split, idxs in splits.items():
        idxs = list(idxs)
        regions = [i % spec.regions for i in range(len(idxs))]
        rng.shuffle(regions)
        by_region: dict[int, list[int]] = {k: [] for k in range(spec.regions)}
        for idx, k in zip(idxs, regions):
            region_of[idx] = k
            by_region[k].append(idx)
        labels: dict[int, Label] = {}
        for k, members in by_region.items():
            flags = [Label.FEASIBLE] * (len(members) // 2) + [Label.INFEASIBLE] * (len(members) - len(members) // 2)
            rng.shuffle(flags)
            labels.update(zip(members, flags))
        reactions = tuple(_reaction(rng, i, region_of[i], labels[i], spec.regions) for i in idxs)
        hardness = {i: rng.random() for i in idxs}

        preds: dict[str, dict[int, Prediction]] = {}
        for t in names:
            table = {}
            for k, members in by_region.items():
                acc = prof[t][k]
                n_wrong = len(members) - round(acc * len(members))
                if _correlated(acc):
                    order = sorted(members, key=lambda i: (-(hardness[i] + JITTER * rng.random()), i))
                    wrong = set(order[:n_wrong])
                else:
                    wrong = set(rng.sample(members, n_wrong))
                for i in members:
                    gold = labels[i]
                    table[i] = Prediction.from_label(Label(1 - gold) if i in wrong else gold)
            for i in idxs:
                if spec.noise and rng.random() < spec.noise:
                    table[i] = Prediction.from_label(Label(1 - table[i].as_label()))
                if spec.na_rate and rng.random() < spec.na_rate:
                    table[i] = Prediction.NA
            preds[t] = table
        datasets[split] = Dataset(split, reactions, preds)

    corpus = SynthCorpus(spec, datasets[Split.VALIDATION], datasets[Split.TEST], names, prof, region_of)
    corpus.measured = verify_profiles(corpus)
    return corpus


def verify_profiles(corpus: SynthCorpus) -> dict[str, dict[str, list[float]]]:
    """Measured per-region accuracy per split; raises if a noiseless corpus misses its profile."""
    spec = corpus.spec
    out: dict[str, dict[str, list[float]]] = {}
    for ds in (corpus.validation, corpus.test):
        out[ds.split.value] = {}
        members: dict[int, list[int]] = {k: [] for k in range(spec.regions)}
        for r in ds:
            members[corpus.region_of[r.idx]].append(r.idx)
        for t in corpus.tool_ids:
            row = []
            for k in range(spec.regions):
                n = len(members[k])
                hits = sum(ds.correct(t, i) for i in members[k])
                if spec.noise == 0 and spec.na_rate == 0 and hits != round(corpus.profiles[t][k] * n):
                    raise SpecInvalid(f"{t} region {k}: {hits}/{n} correct, profile {corpus.profiles[t][k]}")
                row.append(hits / n)
            out[ds.split.value][t] = row
    return out


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> dict[str, Path]:
    """Write datasets, per-tool tables, the registry, ground truth and a runnable config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"validation": out / "validation.jsonl", "test": out / "test.jsonl"}
    for key, ds in (("validation", corpus.validation), ("test", corpus.test)):
        dump_dataset(Dataset(ds.split, ds.reactions, {}), paths[key])
        for t in corpus.tool_ids:
            save_prediction_table(out / "tables" / f"{t}.{key}.csv", ds.predictions[t])
    registry = [
        {"tool_id": t, "display_name": t, "provider": {"kind": "table", "path": f"tables/{t}.{{split}}.csv"}}
        for t in corpus.tool_ids
    ]
    paths["registry"] = out / "tools.json"
    write_json(paths["registry"], registry)
    paths["ground_truth"] = out / "ground_truth.json"
    write_json(paths["ground_truth"], corpus.ground_truth())
    paths["config"] = out / "armor.yaml"
    cfg = {
        "seed": corpus.spec.seed,
        "backend": {"kind": "scripted", "scenario": "oracle"},
        "paths": {"validation": "validation.jsonl", "test": "test.jsonl", "registry": "tools.json", "assets": "assets"},
    }
    atomic_write_text(paths["config"], yaml.safe_dump(cfg, sort_keys=True))
    return paths


# --- oracle scenario ------------------------------------------------------------


def _dump(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _oracle_extraction(bindings: Mapping[str, Any]) -> str:
    rows = [json.loads(line) for line in str(bindings["dataset_text"]).splitlines() if line.strip()]
    by_region: dict[int, list[dict]] = {}
    for row in rows:
        k = region_of_reactants(row["reactants"])
        if k is not None:
            by_region.setdefault(k, []).append(row)
    hits = [row for row in rows if row["prediction"] == row["label"]]
    patterns = []
    for k in sorted(by_region):
        members = by_region[k]
        good = sorted(row["idx"] for row in members if row["prediction"] == row["label"])
        if len(good) >= 5 and len(good) / len(members) >= 0.6:
            reg = REGIONS[k]
            patterns.append({"name": reg.rule, "explanation": reg.explanation, "examples_idx": good[:5]})
    misses = sorted(row["idx"] for row in rows if row["prediction"] != row["label"])
    if misses and len(hits) >= 4:
        patterns.append(
            {"name": BROAD_RULE, "explanation": BROAD_EXPLANATION,
             "examples_idx": sorted(row["idx"] for row in hits)[:4] + misses[:1]}
        )
    acc = 100.0 * len(hits) / len(rows) if rows else 0.0
    return _dump({"tool_acc": f"{acc:.2f}%", "often_correct_on": patterns})


def _oracle_match(bindings: Mapping[str, Any]) -> str:
    name = json.loads(bindings["rule_name"])
    example = json.loads(bindings["example_json"])
    if name == BROAD_RULE:
        return _dump({"belongs_to_rule": True, "confidence": "low", "reason": "The rule is generic."})
    k = _BY_RULE.get(name)
    found = region_of_reactants(example["reactants"])
    covered = k is not None and found == k
    reason = "The characteristic reagent is present." if covered else "The characteristic reagent is absent."
    return _dump({"belongs_to_rule": covered, "confidence": "high", "reason": reason})


def _oracle_memory(bindings: Mapping[str, Any]) -> str:
    gold = bindings["gold_tool"]
    negs = json.loads(bindings["neg_tools_json"])[:3]
    return _dump({
        "tool": gold,
        "evidence": [f"The matched rule of {gold} fits the reagents of this reaction."],
        "elimination": [{"tool": t, "why_not": "Its rule describes a different reagent class."} for t in negs],
        "final_reason": f"{gold} is the specialist for this reaction type.",
    })


def _oracle_select(request: LlmRequest) -> str | None:
    ctx = request.context
    if "candidates" not in ctx:
        return None
    demos = ctx.get("demos", [])
    best = None
    for c in ctx["candidates"]:
        if c["prediction"] == "NA":
            continue
        trusted = sum(d["pos_tool"] == c["tool"] for d in demos)
        rejected = sum(c["tool"] in d["neg_tools"] for d in demos)
        key = (trusted - rejected, c.get("conf") or 0.0, [-ord(ch) for ch in c["tool"]])
        if best is None or key > best[0]:
            best = (key, c["tool"])
    if best is None:
        return _dump({"tool": "abstain", "reason": "No candidate has a usable prediction."})
    return _dump({"tool": best[1], "reason": "Most often trusted on similar reactions."})


def oracle_responder(request: LlmRequest) -> str | None:
    tid, b = request.template_id, request.bindings
    if tid == "PatternExtraction":
        return _oracle_extraction(b)
    if tid == "PatternMatch":
        return _oracle_match(b)
    if tid == "Consolidation":
        return _dump({"keep_index": 0, "reason": "The first phrasing is the clearest."})
    if tid == "MemoryBuild":
        return _oracle_memory(b)
    if tid == "ToolSelect":
        return _oracle_select(request)
    if tid == "DirectAsk":
        coin = int(hashlib.sha256(_dump(dict(b)).encode()).hexdigest(), 16) % 2
        return _dump({"prediction": coin, "reason": "Unsure; best guess."})
    return None


ORACLE = register_scenario(Scenario("oracle", responder=oracle_responder))
