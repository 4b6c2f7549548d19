import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from armor.domain import Label, Prediction
from armor.errors import AssetMissing
from armor.patterns import (
    CoverageCache,
    CoverageJudge,
    CoverageJudgment,
    EmptyT1,
    MissingExample,
    NoCoveredReactions,
    Pattern,
    PatternStatus,
    align_score,
    cell_of,
    conf_score,
    consolidate_patterns,
    diagnostic_cells,
    disagreement_set,
    extract_patterns,
    finalize_pattern_set,
    load_pattern_store,
    refine_patterns,
    sample_diagnostic_subsets,
    save_pattern_store,
    select_tools,
)
from conftest import coverage_backend, make_dataset, responder_backend


def pat(pid, tool="a", name="n", ex=(0, 1, 2, 3, 4), **kw):
    return Pattern(pid, tool, name, "expl", tuple(ex), **kw)


def test_pattern_needs_five_examples():
    with pytest.raises(ValueError):
        pat("p", ex=(1, 2, 3))


def test_pattern_json_roundtrip():
    p = pat("p", align=1.0, cov=0.8, conf=0.7, status=PatternStatus.FINAL, n_covered=9)
    assert Pattern.from_json(json.loads(json.dumps(p.to_json()))) == p


def test_disagreement_set():
    ds = make_dataset([
        (0, 1, {"a": 1, "b": 1}),
        (1, 1, {"a": 1, "b": 0}),
        (2, 0, {"a": "NA", "b": "NA"}),
        (3, 0, {"a": 0, "b": 0}),
    ])
    assert disagreement_set(ds, ["a", "b"]) == {1, 2}
    assert disagreement_set(ds, ["a"]) == {2}
    with pytest.raises(EmptyT1):
        disagreement_set(ds, [])


@pytest.mark.parametrize(
    "label, pred, cell",
    [(Label.FEASIBLE, Prediction.PRED1, "r11"), (Label.FEASIBLE, Prediction.PRED0, "r10"),
     (Label.INFEASIBLE, Prediction.PRED1, "r01"), (Label.INFEASIBLE, Prediction.PRED0, "r00"),
     (Label.FEASIBLE, Prediction.NA, "r10"), (Label.INFEASIBLE, Prediction.NA, "r01")],
)
def test_cell_of(label, pred, cell):
    assert cell_of(label, pred) == cell


def _cell_dataset(per_cell):
    rows, idx = [], 0
    for label, pred in ((1, 1), (1, 0), (0, 1), (0, 0)):
        for _ in range(per_cell):
            rows.append((idx, label, {"t": pred}))
            idx += 1
    return make_dataset(rows)


def test_subset_schedule_and_determinism():
    ds = _cell_dataset(30)
    pool = [r.idx for r in ds]
    subs, skipped = sample_diagnostic_subsets(ds, "t", pool, m_total=8, n_schedule=(5, 10, 25, 45), seed=3)
    assert [s.n for s in subs] == [5, 10, 25, 5, 10, 25]
    assert [w.cell for w in skipped] == ["r11", "r11"]
    again, _ = sample_diagnostic_subsets(ds, "t", pool, m_total=3, n_schedule=(5, 10, 25, 45), seed=3)
    assert again == subs[:3]
    other, _ = sample_diagnostic_subsets(ds, "t", pool, m_total=3, n_schedule=(5, 10, 25, 45), seed=4)
    assert other != again
    for s in subs:
        for c, idxs in s.cells.items():
            assert len(set(idxs)) == s.n and set(idxs) <= set(diagnostic_cells(ds, "t", pool)[c])


def _extraction_backend(entries):
    return responder_backend(lambda req: json.dumps({"tool_acc": "50%", "often_correct_on": entries}))


def test_extraction_filters_bad_entries():
    ds = _cell_dataset(5)
    subs, _ = sample_diagnostic_subsets(ds, "t", [r.idx for r in ds], m_total=1)
    ok = list(subs[0].idxs[:5])
    entries = [
        {"name": " good ", "explanation": "e", "examples_idx": ok},
        {"name": "short", "explanation": "e", "examples_idx": ok[:4]},
        {"name": "dup", "explanation": "e", "examples_idx": ok[:4] + ok[:1]},
        {"name": "outside", "explanation": "e", "examples_idx": ok[:4] + [999]},
        {"name": "bool", "explanation": "e", "examples_idx": ok[:4] + [True]},
        {"name": "", "explanation": "e", "examples_idx": ok},
        "not an object",
    ]
    out = extract_patterns("t", subs[0], ds, _extraction_backend(entries))
    assert [(p.pattern_id, p.name, p.status) for p in out] == [("t-m001-0", "good", PatternStatus.RAW)]


def test_extraction_failure_yields_nothing():
    ds = _cell_dataset(5)
    subs, _ = sample_diagnostic_subsets(ds, "t", [r.idx for r in ds], m_total=1)
    assert extract_patterns("t", subs[0], ds, responder_backend(lambda req: "nope")) == []


def test_refine_gates():
    ds = make_dataset([(i, 1, {"a": 1 if i != 4 else 0}) for i in range(10)])
    calls = []
    judge = CoverageJudge(coverage_backend(lambda name, idx: calls.append(name) or name != "uncovered"))
    ps = [pat("p1", ex=(0, 1, 2, 3, 5)), pat("p2", ex=(0, 1, 2, 3, 4)), pat("p3", name="uncovered", ex=(5, 6, 7, 8, 9))]
    kept = refine_patterns(ps, ds, judge)
    assert [(p.pattern_id, p.align, p.cov, p.status) for p in kept] == [("p1", 1.0, 1.0, PatternStatus.REFINED)]
    assert "n" in calls and len([c for c in calls if c == "n"]) == 5
    assert align_score(ps[1], ds) == 0.8


def test_missing_example():
    ds = make_dataset([(i, 1, {"a": 1}) for i in range(4)])
    with pytest.raises(MissingExample):
        align_score(pat("p"), ds)


def test_consolidation_paths():
    group = [pat("a-m002-0", align=1.0), pat("a-m001-0", align=1.0), pat("a-m003-0", name="other")]
    pick_one = responder_backend(lambda req: '{"keep_index": 1}')
    out = consolidate_patterns(group, "a", pick_one)
    assert [p.pattern_id for p in out] == ["a-m002-0", "a-m003-0"]
    assert all(p.status is PatternStatus.CONSOLIDATED for p in out)
    out_of_range = consolidate_patterns(group, "a", responder_backend(lambda req: '{"keep_index": 7}'))
    assert out_of_range[0].pattern_id == "a-m001-0"
    failing = consolidate_patterns(group, "a", responder_backend(lambda req: "x"))
    assert failing[0].pattern_id == "a-m001-0"
    assert consolidate_patterns(group, "b", pick_one) == []


def test_conf_score_counts_covered_only():
    ds = make_dataset([(i, 1, {"a": 1 if i < 3 else 0}) for i in range(8)])
    judge = CoverageJudge(coverage_backend(lambda name, idx: idx < 4))
    assert conf_score(pat("p"), range(8), ds, judge) == (0.75, 4)
    none = CoverageJudge(coverage_backend(lambda name, idx: False))
    with pytest.raises(NoCoveredReactions):
        conf_score(pat("p"), range(8), ds, none)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.sampled_from("ab"), st.floats(0, 1), st.integers(1, 50)), max_size=20), st.floats(0, 1))
def test_finalize_invariants(rows, tau3):
    ps = [pat(f"{t}-{i:02d}", tool=t, conf=c, n_covered=n) for i, (t, c, n) in enumerate(rows)]
    final = finalize_pattern_set(ps, tau3)
    for tool, kept in final.items():
        assert 1 <= len(kept) <= 5
        assert all(p.conf >= tau3 and p.status is PatternStatus.FINAL for p in kept)
        order = [(-p.conf, -p.n_covered, p.pattern_id) for p in kept]
        assert order == sorted(order)
        eligible = sorted((-p.conf, -p.n_covered, p.pattern_id) for p in ps if p.tool_id == tool and p.conf >= tau3)
        assert order == eligible[:5]


def test_select_tools_ordering():
    final = {
        "a": [pat("a1", tool="a", conf=0.9, name="hit")],
        "b": [pat("b1", tool="b", conf=0.9, name="hit")],
        "c": [pat("c1", tool="c", conf=0.95, name="miss"), pat("c2", tool="c", conf=0.6, name="hit")],
        "d": [pat("d1", tool="d", conf=0.99, name="miss")],
    }
    ds = make_dataset([(0, 1, {})])
    judge = CoverageJudge(coverage_backend(lambda name, idx: name == "hit"))
    ranked = select_tools(ds[0], final, judge, top_l=5, val_accuracy={"b": 0.8, "a": 0.7})
    assert [(t, p.pattern_id) for t, p in ranked] == [("b", "b1"), ("a", "a1"), ("c", "c2")]
    assert [t for t, _ in select_tools(ds[0], final, judge, top_l=1)] == ["a"]


def test_judge_failure_is_not_covered():
    judge = CoverageJudge(responder_backend(lambda req: "garbage"))
    ds = make_dataset([(0, 1, {})])
    assert judge.judge(pat("p"), ds[0]) is False
    assert judge.failures == 1
    assert judge.judge(pat("p"), ds[0]) is False
    assert judge.failures == 1 and judge.cache.hits == 1


def test_cache_first_writer_wins_and_roundtrip(tmp_path):
    cache = CoverageCache()
    cache.put("p", 1, CoverageJudgment(True, "high"))
    assert cache.put("p", 1, CoverageJudgment(False, "low")).covered
    cache.put("q", 0, CoverageJudgment(False, "medium"))
    cache.save(tmp_path / "c.jsonl")
    back = CoverageCache.load(tmp_path / "c.jsonl")
    assert back.items() == cache.items()
    assert len(CoverageCache.load(tmp_path / "none.jsonl")) == 0


def test_pattern_store_roundtrip(tmp_path):
    ps = [pat("b1", tool="b", conf=0.5), pat("a1", tool="a"), pat("a2", tool="a")]
    save_pattern_store(tmp_path / "p.json", ps)
    store = load_pattern_store(tmp_path / "p.json")
    assert list(store) == ["a", "b"] and [p.pattern_id for p in store["a"]] == ["a1", "a2"]
    assert store["b"][0] == ps[0]
    with pytest.raises(AssetMissing):
        load_pattern_store(tmp_path / "none.json")
