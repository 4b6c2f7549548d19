import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from armor.domain import Label, Prediction
from armor.evaluation import (
    ConfusionCounts,
    EmptyInput,
    category_breakdown,
    classification_metrics,
    confusion_counts,
    majority_vote,
    mcc,
    oracle_upper_bound,
    render_tables,
    tool_usage_report,
    voting_baselines,
)
from conftest import make_dataset

F, I = Label.FEASIBLE, Label.INFEASIBLE
P1, P0, NA = Prediction.PRED1, Prediction.PRED0, Prediction.NA


def test_metrics_small_case():
    pairs = [(F, F), (F, F), (F, I), (I, I), (I, F)]
    m = classification_metrics(pairs)
    assert m["confusion"] == {"tp": 2, "fp": 1, "tn": 1, "fn": 1}
    assert m["acc_overall"] == 0.6
    assert m["acc_feasible"] == pytest.approx(2 / 3)
    assert m["acc_infeasible"] == 0.5
    assert m["f1_feasible"] == pytest.approx(2 / 3)
    assert m["f1_infeasible"] == 0.5
    assert m["mcc"] == pytest.approx(1 / 6)


def test_degenerate_metrics():
    m = classification_metrics([(F, F), (F, F)])
    assert m["acc_infeasible"] is None and m["f1_infeasible"] is None and m["mcc"] == 0.0
    with pytest.raises(EmptyInput):
        confusion_counts([])


def test_majority_vote():
    assert majority_vote([P1, P1, P0]) is F
    assert majority_vote([P1, P0]) is I
    assert majority_vote([NA, NA]) is I
    assert majority_vote([P1, NA, NA]) is F
    assert majority_vote([P1, P0, P0], [0.9, 0.4, 0.4]) is F
    with pytest.raises(ValueError):
        majority_vote([P1], [1.0, 2.0])


def test_oracle_upper_bound_and_baselines():
    ds = make_dataset([(0, 1, {"a": 1, "b": 0}), (1, 0, {"a": 1, "b": "NA"}), (2, 0, {"a": 0, "b": 1})])
    assert oracle_upper_bound(ds) == pytest.approx(2 / 3)
    base = voting_baselines(ds, {"a": 0.9, "b": 0.1})
    assert base["single_tool"]["b"]["acc_overall"] == 0.0
    assert base["majority_vote"]["acc_overall"] == pytest.approx(1 / 3)
    assert base["weighted_vote"]["acc_overall"] == pytest.approx(2 / 3)


_label = st.sampled_from([F, I])
_pairs = st.lists(st.tuples(_label, _label), min_size=1, max_size=60)


@given(_pairs)
def test_overall_is_weighted_mean_of_class_accuracies(pairs):
    m = classification_metrics(pairs)
    c = confusion_counts(pairs)
    parts = [(m["acc_feasible"], c.tp + c.fn), (m["acc_infeasible"], c.tn + c.fp)]
    weighted = sum(a * n for a, n in parts if a is not None) / c.total
    assert math.isclose(m["acc_overall"], weighted, rel_tol=1e-12, abs_tol=1e-12)


@given(_pairs)
def test_mcc_symmetric_under_class_swap(pairs):
    c = confusion_counts(pairs)
    assert math.isclose(mcc(c), mcc(c.swapped()), abs_tol=1e-12)
    assert -1.0 <= mcc(c) <= 1.0


@given(st.lists(st.sampled_from([P1, P0, NA]), max_size=15), st.randoms())
def test_majority_permutation_invariant(preds, rnd):
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    assert majority_vote(preds) is majority_vote(shuffled)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_swapped_is_involution(tp, fp, tn, fn):
    c = ConfusionCounts(tp, fp, tn, fn)
    assert c.swapped().swapped() == c


def _traces():
    return [
        {"idx": 0, "stage": "T1Consensus", "final": 1, "gold": 1, "chosen_tool": None},
        {"idx": 1, "stage": "TsConsensus", "final": 0, "gold": 1, "chosen_tool": None},
        {"idx": 2, "stage": "ConflictResolved", "final": 1, "gold": 1, "chosen_tool": "a"},
        {"idx": 3, "stage": "ConflictResolved", "final": 1, "gold": 0, "chosen_tool": "a"},
        {"idx": 4, "stage": "FallbackMajority", "final": 0, "gold": 0, "chosen_tool": None},
    ]


def test_category_breakdown():
    cats = category_breakdown(_traces())
    assert cats["T1"] == {"count": 1, "proportion": 20.0, "acc": 1.0}
    assert cats["Ts"]["acc"] == 0.0
    assert cats["Conflict"]["count"] == 3 and cats["Conflict"]["acc"] == pytest.approx(2 / 3)


def test_tool_usage_report():
    usage = tool_usage_report(_traces(), {"a": 0.4, "b": 0.8}, {"a": "L2"})
    assert usage["conflict_count"] == 3
    assert usage["tools"]["a"]["selected_acc"] == 0.5 and usage["tools"]["a"]["trend"] == "up"
    assert usage["tools"]["b"]["selected_count"] == 0 and usage["tools"]["b"]["trend"] is None
    assert usage["failure"] == {"count": 1, "proportion": pytest.approx(100 / 3)}


def test_render_tables():
    traces = _traces()
    report = {
        "metrics": classification_metrics([(Label(t["gold"]), Label(t["final"])) for t in traces]),
        "categories": category_breakdown(traces),
        "tool_usage": tool_usage_report(traces, {"a": 0.4}),
    }
    text = render_tables(report, {"majority_vote": report["metrics"], "oracle_upper_bound": 1.0})
    assert "armor" in text and "majority_vote" in text and "upper_bound" in text
    assert "Total" in text and "↗" in text
