import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import macro_f1, ranking_metrics
from structext.document import LabelSchema
from structext.metrics import IGNORE, average_precision, entity_f1, format_table, link_f1, link_ranking, rank_sources

SCHEMA = LabelSchema()
Q, A, H, O = (SCHEMA.id_of(c) for c in ("question", "answer", "header", "other"))


def test_perfect_and_total_miss():
    rep = entity_f1([Q, A, H], [Q, A, H], SCHEMA)
    assert (rep.precision, rep.recall, rep.f1) == (1.0, 1.0, 1.0)
    miss = entity_f1([A, Q], [Q, A], SCHEMA)
    assert miss.per_class["question"].precision == 0 and miss.per_class["answer"].recall == 0


def test_hand_confusion_example():
    rep = entity_f1([Q, A, A, O], [Q, Q, A, O], SCHEMA)
    q, a = rep.per_class["question"], rep.per_class["answer"]
    assert (q.precision, q.recall) == (1.0, 0.5)
    assert (a.precision, a.recall) == (0.5, 1.0)
    assert rep.f1 == pytest.approx(2 / 3, abs=1e-12)
    assert rep.averaged == ["question", "answer"]


def test_length_mismatch_and_ignored_units():
    with pytest.raises(ValueError):
        entity_f1([Q], [Q, A], SCHEMA)
    with pytest.raises(ValueError):
        entity_f1([[Q]], [[Q], [A]], SCHEMA)
    rep = entity_f1([[Q, A]], [[Q, IGNORE]], SCHEMA)
    assert rep.f1 == 1.0


def test_ranking_examples():
    P = np.array([[np.nan, 0.1, 0.9], [0.2, np.nan, 0.5], [0.3, 0.4, np.nan]])
    # target 2: candidates 0 (0.9), 1 (0.5)
    assert rank_sources(P, 2) == [0, 1]
    r = link_ranking(P, [(0, 2)])
    assert (r["hit@1"], r["mrank"], r["map"]) == (1.0, 1.0, 1.0)
    P4 = np.array([[np.nan, 0.0, 0.0, 0.0], [0.9, np.nan, 0, 0], [0.8, 0, np.nan, 0], [0.7, 0, 0, np.nan]])
    r = link_ranking(P4, [(2, 0)])
    assert (r["hit@1"], r["hit@2"], r["mrank"], r["map"]) == (0.0, 1.0, 2.0, 0.5)
    assert average_precision([5, 6, 7, 8], {5, 7}) == pytest.approx(5 / 6)
    assert link_ranking(P, []) == {}


def test_ties_rank_lower_index_first():
    P = np.full((3, 3), 0.5)
    np.fill_diagonal(P, np.nan)
    assert rank_sources(P, 0) == [1, 2]


def test_link_f1_examples():
    assert link_f1({(1, 2)}, {(1, 2)}) == (1.0, 1.0, 1.0)
    assert link_f1(set(), {(1, 2)}) == (0.0, 0.0, 0.0)
    p, r, f = link_f1({(1, 2), (1, 3)}, {(1, 2)})
    assert (p, r) == (0.5, 1.0) and f == pytest.approx(2 / 3)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_entity_f1_matches_oracle(data):
    n = data.draw(st.integers(1, 6))
    gold = data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    pred = data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    rep = entity_f1(pred, gold, SCHEMA)
    assert (rep.precision, rep.recall, rep.f1) == pytest.approx(macro_f1(pred, gold, 4, SCHEMA.background_id), abs=0)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_ranking_matches_oracle(data):
    n = data.draw(st.integers(2, 6))
    # coarse values make ties common
    vals = data.draw(st.lists(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]), min_size=n * n, max_size=n * n))
    P = np.array(vals, dtype=float).reshape(n, n)
    np.fill_diagonal(P, np.nan)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    gold = data.draw(st.lists(st.sampled_from(pairs), max_size=4, unique=True))
    ours, ref = link_ranking(P, gold), ranking_metrics(P, gold)
    ours.pop("gold_pairs", None)
    assert ours == pytest.approx(ref, abs=0)


def test_format_table_aligns_columns():
    text = format_table({"a": 0.5, "bbb": {"c": 1}})
    assert text.splitlines() == ["a      0.5000", "bbb.c  1"]
