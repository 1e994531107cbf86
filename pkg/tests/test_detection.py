import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from twin_graph_ad import detection as dt

from oracles import best_f1_sweep, confusion


def f1_at(scores, labels, thr):
    tp, fp, tn, fn = confusion((np.asarray(scores) >= thr).astype(int), labels)
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def test_threshold_examples():
    assert dt.select_threshold([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == pytest.approx(0.5)
    # best F1 reached at two cuts: the lower one wins
    thr = dt.select_threshold([0.1, 0.5, 0.6, 0.9], [0, 1, 0, 1])
    assert thr == pytest.approx(0.3)
    assert dt.select_threshold([2.0, 2.0, 2.0], [0, 1, 0]) == 2.0
    # unlabeled entries are ignored
    assert dt.select_threshold([0.1, 5.0, 0.9], [0, -1, 1]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        dt.select_threshold([0.1, 0.2], [0, 0])


scores_labels = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 10, allow_nan=False).map(lambda x: round(x, 2)), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)))


@settings(max_examples=200)
@given(scores_labels)
def test_threshold_reaches_sweep_optimum(sl):
    s, y = sl
    assume(0 < sum(y) < len(y))
    thr = dt.select_threshold(s, y)
    assert f1_at(s, y, thr) == pytest.approx(best_f1_sweep(s, y), abs=1e-12)


@settings(max_examples=200)
@given(scores_labels)
def test_ranking_metrics_match_sklearn(sl):
    s, y = sl
    assume(0 < sum(y) < len(y))
    assert dt.roc_auc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    assert dt.average_precision(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


@settings(max_examples=100)
@given(scores_labels, st.sampled_from(["exp", "affine", "cube"]))
def test_metrics_invariant_to_monotone_maps(sl, kind):
    s, y = sl
    assume(0 < sum(y) < len(y))
    s = np.asarray(s)
    f = {"exp": np.exp, "affine": lambda x: 3 * x - 7, "cube": lambda x: x ** 3}[kind]
    assert dt.roc_auc(f(s), y) == pytest.approx(dt.roc_auc(s, y), abs=1e-12)
    assert dt.average_precision(f(s), y) == pytest.approx(dt.average_precision(s, y), abs=1e-12)
    assert f1_at(f(s), y, dt.select_threshold(f(s), y)) == pytest.approx(f1_at(s, y, dt.select_threshold(s, y)))


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(-1, 1)), min_size=1, max_size=80))
def test_confusion_matches_bruteforce(pairs):
    d = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    assume((y == 1).any())
    rep = dt.evaluate(np.random.default_rng(0).random(len(d)), y, d)
    tp, fp, tn, fn = confusion(d, y)
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (tp, fp, tn, fn)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    assert rep.f1 == pytest.approx(f1)


def test_evaluate_edge_cases():
    with pytest.raises(ValueError, match="no positive"):
        dt.evaluate([0.1, 0.2], [0, 0], [0, 1])
    rep = dt.evaluate([0.1, 0.9], [1, 1], [0, 1])
    assert math.isnan(rep.roc_auc) and rep.recall == 0.5 and rep.precision == 1.0
    rep = dt.evaluate([0.1, 0.9], [1, 0], [0, 0])
    assert rep.precision == 0.0 and rep.f1 == 0.0
    perfect = dt.evaluate([0.0, 1.0, 0.2, 0.7], [0, 1, 0, 1], [0, 1, 0, 1])
    assert perfect.f1 == 1.0 and perfect.roc_auc == 1.0 and perfect.avg_precision == 1.0


def test_fallback_threshold():
    assert dt.fallback_threshold([1.0, 1.0, 1.0]) == 1.0
    assert dt.fallback_threshold([0.0, 2.0], 3) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        dt.fallback_threshold([])


def test_decide_modes():
    table = dt.ScoreTable(np.array([4, 5]), np.array([[0.1, 2.0], [3.0, 0.5]]), np.array([[0.2, 0.6], [0.5, 0.51]]))
    assert dt.decide(table).tolist() == [[0, 1], [0, 1]]
    assert dt.decide(table, "threshold", 2.0).tolist() == [[0, 1], [1, 0]]
    with pytest.raises(ValueError):
        dt.decide(table, "threshold")
    with pytest.raises(ValueError):
        dt.decide(table, "vote")


def test_decisions_csv_roundtrip(tmp_path):
    table = dt.ScoreTable(np.array([0, 1]), np.array([[0.1, 2.0], [3.0, 0.5]]), np.array([[0.2, 0.6], [0.5, 1.0]]))
    decs = dt.decisions_from_table(table, dt.decide(table), [100, 160], ["a", "b"], "classifier")
    dt.write_decisions_csv(tmp_path / "d.csv", decs)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "timestamp,instance,re,p_abnormal,decided"
    assert dt.read_decisions_csv(tmp_path / "d.csv") == decs
    assert [(d.timestamp, d.instance_id, d.decided) for d in decs] == [(100, "a", 0), (100, "b", 1),
                                                                        (160, "a", 0), (160, "b", 1)]
    (tmp_path / "bad.csv").write_text("ts,instance\n")
    with pytest.raises(ValueError):
        dt.read_decisions_csv(tmp_path / "bad.csv")
    with pytest.raises(ValueError):
        dt.Decision(0, "a", 1.0, 1.5, 1)


def test_report_format():
    text = dt.format_report([("full", {"precision": 1, "recall": 0.5, "f1": 0.667, "roc_auc": 0.9,
                                       "avg_precision": 0.8})])
    lines = text.splitlines()
    assert lines[0].split() == ["Method", "PR", "RC", "F1", "AUC", "AP"]
    assert lines[2].split() == ["full", "1.000", "0.500", "0.667", "0.900", "0.800"]
