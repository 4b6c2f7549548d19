import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from armor.domain import load_dataset
from armor.evaluation import oracle_upper_bound
from armor.llm import ScriptedBackend, TemplateId, build_request
from armor.synth import (
    BROAD_RULE,
    REGIONS,
    SpecInvalid,
    SynthSpec,
    generate,
    region_of_reactants,
    tool_profiles,
    write_corpus,
)
from armor.tools import load_registry, materialize


@pytest.mark.parametrize(
    "kw", [{"tools": 2}, {"regions": 1}, {"regions": 11}, {"size": 50, "regions": 3}, {"noise": 0.6}, {"na_rate": 1.0}]
)
def test_spec_validation(kw):
    with pytest.raises(SpecInvalid):
        SynthSpec(**kw)


def test_profiles_shape():
    prof = tool_profiles(13, 6)
    assert prof["gen_1"] == [0.86] * 6
    assert prof["spec_01"][0] == 0.95 and prof["spec_02"][0] == 0.75 and prof["spec_03"][0] == 0.75
    assert prof["spec_10"] == [0.55] * 6
    for k in range(6):
        assert sum(1 for t in prof if prof[t][k] == 0.95) == 1


@settings(max_examples=8, deadline=None)
@given(st.integers(3, 9), st.integers(2, 5), st.integers(0, 1000))
def test_exact_profiles_hold(tools, regions, seed):
    corpus = generate(SynthSpec(tools, regions, 40 * regions, seed))
    for split in ("validation", "test"):
        for t, row in corpus.measured[split].items():
            for k, acc in enumerate(row):
                n = sum(1 for i, reg in corpus.region_of.items() if reg == k and (i < corpus.spec.size // 2) == (split == "validation"))
                assert acc == round(corpus.profiles[t][k] * n) / n


def test_seed_determinism():
    a, b = generate(SynthSpec(7, 3, 300, 5)), generate(SynthSpec(7, 3, 300, 5))
    assert a.validation.reactions == b.validation.reactions and a.test.predictions == b.test.predictions
    assert generate(SynthSpec(7, 3, 300, 6)).validation.reactions != a.validation.reactions


def test_regions_are_recoverable_and_upper_bound_high():
    corpus = generate(SynthSpec(13, 6, 1200, 1))
    for r in corpus.test:
        assert region_of_reactants(r.reactants) == corpus.region_of[r.idx]
    assert oracle_upper_bound(corpus.test) >= 0.99


def test_noise_and_na_relax_profiles():
    corpus = generate(SynthSpec(7, 3, 300, 2, noise=0.1, na_rate=0.05))
    assert any(p.value == "NA" for table in corpus.validation.predictions.values() for p in table.values())


def test_written_corpus_reloads(tmp_path):
    corpus = generate(SynthSpec(7, 3, 300, 3))
    paths = write_corpus(corpus, tmp_path)
    tools = load_registry(paths["registry"], "test")
    ds = load_dataset(paths["test"], split="test", tool_ids=[])
    full = materialize(tools, ds)
    assert full.predictions == corpus.test.predictions
    truth = json.loads(paths["ground_truth"].read_text(encoding="utf-8"))
    assert truth["profiles"] == corpus.profiles


def _ask(template, bindings, context=None):
    return json.loads(ScriptedBackend("oracle").complete(build_request(template, bindings, context)).text)


def test_oracle_match_and_select():
    reg = REGIONS[0]
    example = json.dumps({"idx": 1, "reactants": f"CC.{reg.reagent}", "product": "C"})
    match = lambda rule: _ask(TemplateId.PATTERN_MATCH, {"rule_name": json.dumps(rule), "rule_explanation": '"x"', "example_json": example})
    assert match(reg.rule)["belongs_to_rule"] is True
    assert match(REGIONS[1].rule)["belongs_to_rule"] is False
    assert match(BROAD_RULE)["belongs_to_rule"] is True
    sel_bindings = {k: "" for k in ("reactants", "product", "cands_section", "conf_hint", "tiebreak", "demos_section", "allowed_str")}
    cands = [{"tool": "a", "prediction": 1, "conf": 0.7, "pattern_id": "a-p"}, {"tool": "b", "prediction": 0, "conf": 0.9, "pattern_id": "b-p"}]
    assert _ask(TemplateId.TOOL_SELECT, sel_bindings, {"idx": 1, "candidates": cands, "demos": []})["tool"] == "b"
    na = [{**c, "prediction": "NA"} for c in cands]
    assert _ask(TemplateId.TOOL_SELECT, sel_bindings, {"idx": 1, "candidates": na, "demos": []})["tool"] == "abstain"
