"""``armor`` command line: one verb per offline stage plus predict / evaluate / report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

from filelock import FileLock, Timeout

from armor.config import ArmorConfig, load_config
from armor.domain import Dataset, Split, load_dataset
from armor.errors import ArmorError, AssetMissing
from armor.evaluation import render_tables, voting_baselines
from armor.io import atomic_write_text, write_json
from armor.memory import ConflictMemory
from armor.patterns import CoverageCache, CoverageJudge, load_pattern_store, save_pattern_store
from armor.pipeline import (
    Armor,
    Hierarchy,
    backend_from_config,
    build_hierarchy,
    build_memory_stage,
    consolidate_stage,
    mine_patterns,
    refine_stage,
)
from armor.synth import SynthSpec, generate, write_corpus
from armor.tools import ToolRecord, load_registry, materialize

log = logging.getLogger("armor")

ASSETS = {
    "hierarchy": "hierarchy.json",
    "tool_levels": "tools.levels.json",
    "raw_patterns": "patterns.raw.json",
    "refined_patterns": "patterns.refined.json",
    "patterns": "patterns.json",
    "memory": "memory.jsonl",
    "report": "report.json",
    "evaluation": "evaluation.json",
    "tables": "report.txt",
}


class AssetLocked(ArmorError):
    pass


class Workspace:
    """Resolves the files a config declares and loads them on demand."""

    def __init__(self, config: ArmorConfig):
        self.config = config
        self.assets = config.path("assets", "assets")
        self._backend = None

    def asset(self, key: str) -> Path:
        if key in self.config.paths:
            return self.config.path(key)
        return self.assets / ASSETS[key]

    def require(self, key: str) -> Path:
        p = self.asset(key)
        if not p.exists():
            raise AssetMissing(p, key.replace("_", " "))
        return p

    @property
    def backend(self):
        if self._backend is None:
            self._backend = backend_from_config(self.config)
        return self._backend

    def tools(self, split: Split) -> list[ToolRecord]:
        path = self.config.path("registry")
        return load_registry(path, split.value, self.backend)

    def dataset(self, split: Split) -> tuple[Dataset, list[ToolRecord]]:
        path = self.config.path(split.value)
        if not path.exists():
            raise AssetMissing(path, f"{split.value} dataset")
        tools = self.tools(split)
        ds = load_dataset(path, split=split, tool_ids=[t.tool_id for t in tools])
        return materialize(tools, ds, self.config.workers), tools

    def hierarchy(self) -> Hierarchy:
        with open(self.require("hierarchy"), encoding="utf-8") as fh:
            return Hierarchy.from_json(json.load(fh))

    def coverage_path(self, split: Split) -> Path:
        return self.assets / f"coverage.{split.value}.jsonl"

    def judge(self, split: Split) -> CoverageJudge:
        path = self.coverage_path(split)
        cache = CoverageCache.load(path) if path.exists() else CoverageCache()
        return CoverageJudge(self.backend, cache, self.config.workers, self.config.llm_max_chars)

    def save_judge(self, judge: CoverageJudge, split: Split) -> dict[str, int]:
        judge.cache.save(self.coverage_path(split))
        return {"cache_hits": judge.cache.hits, "cache_misses": judge.cache.misses, "judge_failures": judge.failures}


@contextmanager
def asset_lock(assets: Path, timeout: float) -> Iterator[None]:
    assets.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(assets / ".armor.lock"))
    try:
        lock.acquire(timeout=timeout)
    except Timeout:
        raise AssetLocked(f"asset directory {assets} is locked by another command") from None
    try:
        yield
    finally:
        lock.release()


def _counters(stage: str, **counts: Any) -> None:
    log.info("stage=%s %s", stage, " ".join(f"{k}={v}" for k, v in counts.items()))


# --- verbs ----------------------------------------------------------------------


def cmd_synth_gen(args: argparse.Namespace) -> int:
    spec = SynthSpec(args.tools, args.regions, args.size, args.seed, args.noise, args.na_rate)
    corpus = generate(spec)
    paths = write_corpus(corpus, args.out)
    _counters("synth-gen", tools=spec.tools, regions=spec.regions, reactions=spec.size, out=args.out)
    print(f"config={paths['config']}")
    return 0


def cmd_build_hierarchy(ws: Workspace, args: argparse.Namespace) -> int:
    val, tools = ws.dataset(Split.VALIDATION)
    hier, records = build_hierarchy(tools, val, ws.config.rho)
    write_json(ws.asset("hierarchy"), hier.to_json())
    write_json(ws.asset("tool_levels"), [t.to_json() for t in records])
    _counters("build-hierarchy", tools=len(records), l1=len(hier.l1), l2=len(hier.l2))
    return 0


def cmd_extract_patterns(ws: Workspace, args: argparse.Namespace) -> int:
    val, _ = ws.dataset(Split.VALIDATION)
    hier = ws.hierarchy()
    raw, stats = mine_patterns(val, hier, ws.backend, ws.config)
    save_pattern_store(ws.asset("raw_patterns"), raw)
    _counters("extract-patterns", llm_calls=ws.backend.calls, **stats)
    return 0


def cmd_refine(ws: Workspace, args: argparse.Namespace) -> int:
    val, _ = ws.dataset(Split.VALIDATION)
    raw = [p for ps in load_pattern_store(ws.require("raw_patterns")).values() for p in ps]
    judge = ws.judge(Split.VALIDATION)
    refined, stats = refine_stage(raw, val, judge, ws.config)
    save_pattern_store(ws.asset("refined_patterns"), refined)
    _counters("refine", llm_calls=ws.backend.calls, **stats, **ws.save_judge(judge, Split.VALIDATION))
    return 0


def cmd_consolidate(ws: Workspace, args: argparse.Namespace) -> int:
    val, _ = ws.dataset(Split.VALIDATION)
    hier = ws.hierarchy()
    refined = [p for ps in load_pattern_store(ws.require("refined_patterns")).values() for p in ps]
    judge = ws.judge(Split.VALIDATION)
    final, stats = consolidate_stage(refined, val, hier, judge, ws.backend, ws.config)
    save_pattern_store(ws.asset("patterns"), final)
    _counters("consolidate", llm_calls=ws.backend.calls, **stats, **ws.save_judge(judge, Split.VALIDATION))
    return 0


def cmd_build_memory(ws: Workspace, args: argparse.Namespace) -> int:
    val, _ = ws.dataset(Split.VALIDATION)
    hier = ws.hierarchy()
    final = load_pattern_store(ws.require("patterns"))
    judge = ws.judge(Split.VALIDATION)
    memory, stats = build_memory_stage(val, hier, final, judge, ws.backend, ws.config)
    memory.save(ws.asset("memory"))
    _counters("build-memory", llm_calls=ws.backend.calls, **stats, **ws.save_judge(judge, Split.VALIDATION))
    return 0


def load_armor(ws: Workspace, tools: list[ToolRecord], split: Split) -> tuple[Armor, CoverageJudge]:
    hier = ws.hierarchy()
    final = load_pattern_store(ws.require("patterns"))
    mem_path = ws.asset("memory")
    memory = None
    if mem_path.exists():
        memory, stats = ConflictMemory.load(mem_path, None, ws.config.fp_width, ws.config.fp_nmax)
        _counters("load-memory", **stats)
    else:
        log.warning("no conflict memory at %s; conflict resolution runs zero-shot", mem_path)
    levels = {t: hier.level(t) for t in hier.all_tools}
    records = [t.with_level(levels.get(t.tool_id, t.level), hier.accuracy.get(t.tool_id)) for t in tools]
    judge = ws.judge(split)
    return Armor(ws.config, records, hier, final, ws.backend, memory, judge), judge


def cmd_predict(ws: Workspace, args: argparse.Namespace) -> int:
    split = Split(args.split)
    ds, tools = ws.dataset(split)
    armor, judge = load_armor(ws, tools, split)
    report = armor.run_batch(ds)
    out = Path(args.out) if args.out else ws.asset("report")
    write_json(out, report)
    ws.save_judge(judge, split)
    _counters("predict", reactions=len(ds), llm_calls=ws.backend.calls, **report["stage_counts"])
    if "metrics" in report:
        print(f"acc_overall={report['metrics']['acc_overall']:.4f} mcc={report['metrics']['mcc']:.4f}")
    return 0


def cmd_evaluate(ws: Workspace, args: argparse.Namespace) -> int:
    split = Split(args.split)
    ds, _ = ws.dataset(split)
    if not ds.labeled:
        raise ArmorError(f"{split.value} dataset has unlabeled reactions")
    val_acc = ws.hierarchy().accuracy if ws.asset("hierarchy").exists() else None
    evaluation = voting_baselines(ds, val_acc)
    report_path = ws.asset("report")
    if report_path.exists():
        with open(report_path, encoding="utf-8") as fh:
            evaluation["armor"] = json.load(fh).get("metrics")
    write_json(ws.asset("evaluation"), evaluation)
    _counters("evaluate", reactions=len(ds), upper_bound=f"{evaluation['oracle_upper_bound']:.4f}")
    return 0


def cmd_report(ws: Workspace, args: argparse.Namespace) -> int:
    with open(ws.require("report"), encoding="utf-8") as fh:
        report = json.load(fh)
    evaluation = None
    if ws.asset("evaluation").exists():
        with open(ws.asset("evaluation"), encoding="utf-8") as fh:
            evaluation = json.load(fh)
    text = render_tables(report, evaluation)
    atomic_write_text(ws.asset("tables"), text)
    sys.stdout.write(text)
    return 0


STAGE_VERBS: dict[str, Callable[[Workspace, argparse.Namespace], int]] = {
    "build-hierarchy": cmd_build_hierarchy,
    "extract-patterns": cmd_extract_patterns,
    "refine": cmd_refine,
    "consolidate": cmd_consolidate,
    "build-memory": cmd_build_memory,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="armor", description="Tool-ensemble reaction feasibility pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("synth-gen", help="write a synthetic corpus, tool tables and a config")
    g.add_argument("--tools", type=int, default=13)
    g.add_argument("--regions", type=int, default=6)
    g.add_argument("--size", type=int, default=2000)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--na-rate", type=float, default=0.0)
    g.add_argument("--out", default="synth")

    for verb in STAGE_VERBS:
        p = sub.add_parser(verb)
        p.add_argument("-c", "--config", required=True, help="YAML or JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--lock-timeout", type=float, default=60.0)
        if verb in ("predict", "evaluate"):
            p.add_argument("--split", default="test", choices=["validation", "test"])
        if verb == "predict":
            p.add_argument("--out", help="report path (default: assets/report.json)")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    start = time.monotonic()
    try:
        if args.verb == "synth-gen":
            status = cmd_synth_gen(args)
        else:
            config = load_config(args.config, args.overrides)
            ws = Workspace(config)
            with asset_lock(ws.assets, args.lock_timeout):
                status = STAGE_VERBS[args.verb](ws, args)
    except ArmorError as exc:
        print(f"error={exc.code} type={type(exc).__name__} detail={json.dumps(str(exc))}", file=sys.stderr)
        return exc.exit_code
    log.info("verb=%s seconds=%.2f", args.verb, time.monotonic() - start)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
