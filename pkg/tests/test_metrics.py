import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grgcl.metrics import (
    MetricError,
    accuracy,
    evaluate_ranking,
    ndcg_at_k,
    rank_items,
    recall_at_k,
)


def test_rank_examples():
    np.testing.assert_array_equal(rank_items([0.9, 0.1]), [0, 1])
    np.testing.assert_array_equal(rank_items([0.5, 0.7, 0.5, 0.7]), [1, 3, 0, 2])
    np.testing.assert_array_equal(rank_items([0.9, 0.5, 0.1], exclude=[0]), [1, 2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=40), st.data())
def test_rank_is_permutation_of_kept_items(scores, data):
    n = len(scores)
    excl = data.draw(st.lists(st.integers(0, n - 1), unique=True, max_size=n))
    ranked = rank_items(scores, excl)
    assert sorted(ranked.tolist()) == sorted(set(range(n)) - set(excl))
    s = np.asarray(scores, float)[ranked]
    # descending scores, ascending index within ties
    for a, b, x, y in zip(s, s[1:], ranked, ranked[1:]):
        assert a > b or (a == b and x < y)


def test_recall_examples():
    ranked = list(range(30))
    assert recall_at_k(ranked, [0], 20) == 1.0
    assert recall_at_k(ranked, [20], 20) == 0.0
    assert recall_at_k(ranked, [3, 25], 20) == 0.5


def test_ndcg_examples():
    ranked = list(range(30))
    assert ndcg_at_k(ranked, [0], 20) == 1.0
    assert ndcg_at_k(ranked, [1], 20) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert ndcg_at_k(ranked, [1], 20) == pytest.approx(0.630930, abs=1e-6)
    assert ndcg_at_k(ranked, [25], 20) == 0.0


def test_metric_errors():
    with pytest.raises(MetricError):
        recall_at_k([0], [0], 0)
    with pytest.raises(MetricError):
        ndcg_at_k([0], [], 5)


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(15))), st.sets(st.integers(0, 14), min_size=1, max_size=8))
def test_recall_monotone_and_ndcg_range(ranked, test):
    rec = [recall_at_k(ranked, list(test), k) for k in range(1, 16)]
    assert all(a <= b for a, b in zip(rec, rec[1:]))
    for k in range(1, 16):
        v = ndcg_at_k(ranked, list(test), k)
        assert 0.0 <= v <= 1.0 + 1e-12
    top = set(ranked[: len(test)])
    full = ndcg_at_k(ranked, list(test), len(test))
    assert (abs(full - 1.0) < 1e-12) == (top == test)


def test_accuracy():
    y = np.array([0, 1, 1, 0])
    assert accuracy(y, y) == 1.0
    assert accuracy(1 - y, y) == 0.0
    assert accuracy(np.array([0, 1, 0, 1]), y) == 0.5
    with pytest.raises(MetricError):
        accuracy(y, y, np.zeros(4, bool))


def test_evaluate_ranking_matches_per_user_functions():
    rng = np.random.default_rng(0)
    users, items = rng.normal(size=(12, 4)), rng.normal(size=(30, 4))
    # some exact ties
    items[5] = items[6]
    train = [rng.choice(30, 4, replace=False) for _ in range(12)]
    test = []
    for u in range(12):
        rest = np.setdiff1d(np.arange(30), train[u])
        test.append(rng.choice(rest, int(rng.integers(0, 4)), replace=False))
    res = evaluate_ranking(users, items, train, test, k=10, chunk=5)
    rec, nd = [], []
    for u in range(12):
        if len(test[u]) == 0:
            continue
        ranked = rank_items(items @ users[u], train[u])
        rec.append(recall_at_k(ranked, test[u], 10))
        nd.append(ndcg_at_k(ranked, test[u], 10))
    assert res.users == len(rec)
    assert res.recall == pytest.approx(np.mean(rec), abs=1e-12)
    assert res.ndcg == pytest.approx(np.mean(nd), abs=1e-12)
    assert set(res.to_dict()) == {"recall", "ndcg", "k", "users"}


def test_evaluate_ranking_excludes_train_items():
    users = np.array([[1.0, 0.0]])
    items = np.array([[5.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    res = evaluate_ranking(users, items, [np.array([0])], [np.array([1])], k=1)
    assert res.recall == 1.0 and res.ndcg == 1.0
