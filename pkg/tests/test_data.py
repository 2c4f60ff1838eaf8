import json

import numpy as np
import pytest
from scipy import stats

from grgcl.data import (
    CsbmParams,
    DataError,
    gen_csbm,
    gen_planted_bipartite,
    load_interactions,
    load_node_graph,
    load_rec_data,
    planted_instance,
    read_pairs,
    split_edges,
    write_meta,
    write_node_graph,
    write_split_dir,
)
from grgcl.metrics import accuracy
from grgcl.training import fit_linear_classifier, predict, random_split_mask


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


# -- interaction files


def test_single_user_split(tmp_path):
    f = write_lines(tmp_path / "x.tsv", [f"alice\titem{i}" for i in range(5)])
    g = load_interactions(f, 0.8, seed=0)
    assert (g.m, len(g.test_edges)) == (4, 1)


def test_trailing_fields_ignored_and_ids_first_seen(tmp_path):
    f = write_lines(tmp_path / "x.tsv", ["b\tz\t5\t2020", "a\ty", "b\ty"])
    g = load_interactions(f, 1.0)
    assert g.user_ids == ["b", "a"] and g.item_ids == ["z", "y"]


def test_malformed_line_number(tmp_path):
    f = write_lines(tmp_path / "x.tsv", ["a\tb", "", "oops"])
    with pytest.raises(DataError, match=":3:"):
        read_pairs(f)


def test_empty_file(tmp_path):
    f = write_lines(tmp_path / "x.tsv", [])
    with pytest.raises(DataError, match="no interactions"):
        load_interactions(f)


def test_duplicates_removed_and_reported(tmp_path):
    f = write_lines(tmp_path / "x.tsv", ["a\tx", "a\tx", "a\ty", "b\tx"])
    g = load_interactions(f, 1.0)
    assert g.m == 3
    assert g.meta["duplicates_removed"] == 1


def test_split_keeps_small_users_in_train():
    edges = np.array([[0, 0], [1, 1], [1, 2], [1, 3], [1, 0]])
    train, test = split_edges(2, 4, edges, 0.5, 0)
    assert [0, 0] in train.tolist()
    assert len(test) == 2 and (test[:, 0] == 1).all()


def test_split_counts_are_exact():
    rng = np.random.default_rng(0)
    r = rng.random((40, 60)) < 0.1
    u, i = np.nonzero(r)
    edges = np.column_stack([u, i])
    train, test = split_edges(40, 60, edges, 0.5, 1)
    deg = np.bincount(u, minlength=40)
    n_train = np.bincount(train[:, 0], minlength=40)
    expected = np.where(deg < 2, deg, np.maximum(1, np.round(0.5 * deg)))
    np.testing.assert_array_equal(n_train, expected)
    assert len(train) + len(test) == len(edges)


@pytest.mark.parametrize("seed", range(10))
def test_split_prefers_edges_that_keep_items_trained(seed):
    # user 0 holds items 0 and 1; item 1 is shared with user 1
    edges = np.array([[0, 0], [0, 1], [1, 1], [1, 2], [1, 3]])
    train, test = split_edges(2, 4, edges, 0.5, seed)
    assert [0, 1] in test.tolist()
    assert [0, 0] in train.tolist()


def test_cold_items_kept(tmp_path):
    f = write_lines(tmp_path / "x.tsv", ["a\tx", "a\ty", "b\tz", "b\tw"])
    g = load_interactions(f, 0.5, 0)
    assert g.n_items == 4 and len(g.test_edges) == 2


def test_split_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    lines = [f"u{u}\ti{i}" for u, i in zip(rng.integers(0, 30, 400), rng.integers(0, 50, 400))]
    f = write_lines(tmp_path / "x.tsv", lines)
    a, b, c = (load_interactions(f, 0.8, s) for s in (3, 3, 4))
    np.testing.assert_array_equal(a.test_edges, b.test_edges)
    assert not np.array_equal(a.test_edges, c.test_edges)


def test_split_dir_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    lines = [f"user-{u}\titem-{i}" for u, i in zip(rng.integers(0, 25, 300), rng.integers(0, 40, 300))]
    g = load_interactions(write_lines(tmp_path / "x.tsv", lines), 0.8, 0)
    write_split_dir(g, tmp_path / "d")
    h = load_rec_data(tmp_path / "d")
    assert h.user_ids == g.user_ids and h.item_ids == g.item_ids
    assert set(map(tuple, h.edges.tolist())) == set(map(tuple, g.edges.tolist()))
    assert set(map(tuple, h.test_edges.tolist())) == set(map(tuple, g.test_edges.tolist()))


def test_isolated_items_dropped(tmp_path):
    (tmp_path / "d").mkdir()
    write_lines(tmp_path / "d" / "train.tsv", ["a\tx", "b\tx"])
    write_lines(tmp_path / "d" / "test.tsv", ["a\ty"])
    g = load_rec_data(tmp_path / "d")
    assert g.n_items == 1 and len(g.test_edges) == 0


# -- planted-block generator


def test_planted_disjoint_blocks():
    g = gen_planted_bipartite(80, 120, 4, 0.3, 0.0, seed=0)
    ub = np.array(g.meta["user_block"])
    ib = np.array(g.meta["item_block"])
    assert (ub[g.edges[:, 0]] == ib[g.edges[:, 1]]).all()


def test_planted_min_degree_and_metadata():
    g = gen_planted_bipartite(seed=5)
    assert g.user_degrees.min() >= 2
    assert g.meta["seed"] == 5 and g.meta["kind"] == "planted"


def test_planted_mean_degree():
    means = [gen_planted_bipartite(seed=s).user_degrees.mean() for s in range(10)]
    expected = 0.2 * 75 + 0.01 * 225
    assert expected == pytest.approx(17.25)
    for m in means:
        assert abs(m - expected) <= 0.15 * expected


def test_planted_infeasible():
    with pytest.raises(DataError, match="expected user degree"):
        gen_planted_bipartite(20, 20, 4, 0.1, 0.01)
    with pytest.raises(DataError):
        gen_planted_bipartite(20, 20, 4, 0.01, 0.2)


def test_planted_null_model_matches_binomial():
    # with p_in == p_out, user degrees are Binomial(n_items, p)
    p, n_items = 0.05, 300
    deg = np.concatenate(
        [gen_planted_bipartite(200, n_items, 4, p, p, seed=s).user_degrees for s in range(20)]
    )
    edges = [0, 10, 12, 14, 16, 18, 20, 23, np.inf]
    observed = np.histogram(deg, bins=edges)[0]
    cdf = stats.binom.cdf(np.array(edges[1:-1]) - 1, n_items, p)
    probs = np.diff(np.concatenate([[0.0], cdf, [1.0]]))
    _, pval = stats.chisquare(observed, probs * len(deg))
    assert pval > 1e-3


def test_planted_instance_split():
    g = planted_instance(seed=1)
    assert len(g.test_edges) > 0 and g.meta["split_ratio"] == 0.8
    assert (g.user_degrees >= 1).all()


def test_planted_deterministic():
    a, b = gen_planted_bipartite(seed=9), gen_planted_bipartite(seed=9)
    np.testing.assert_array_equal(a.edges, b.edges)


# -- CSBM


def test_csbm_params_validation():
    with pytest.raises(DataError):
        CsbmParams(p=0.1, q=0.2)
    with pytest.raises(DataError):
        CsbmParams(d=0)


def test_csbm_two_nodes():
    for seed in range(20):
        g = gen_csbm(CsbmParams(n=2, d=2, p=1.0, q=0.0, seed=seed))
        same = g.labels[0] == g.labels[1]
        assert g.m == int(same)


def test_csbm_rademacher_labels_and_feature_variance():
    g = gen_csbm(CsbmParams(n=2000, d=8, p=0.0, q=0.0, seed=0))
    assert set(np.unique(g.labels)) == {-1, 1}
    assert abs(g.labels.mean()) < 4 / np.sqrt(2000)
    assert g.features.var(axis=0).mean() == pytest.approx(1 / 8, rel=0.05)


def test_csbm_p_equals_q_independence():
    for seed in range(5):
        g = gen_csbm(CsbmParams(n=300, p=0.05, q=0.05, seed=seed))
        y = g.labels
        same = y[g.edges[:, 0]] == y[g.edges[:, 1]]
        n_pos = (y == 1).sum()
        n_same = n_pos * (n_pos - 1) // 2 + (300 - n_pos) * (299 - n_pos) // 2
        n_diff = n_pos * (300 - n_pos)
        r1, r2 = same.sum() / n_same, (~same).sum() / n_diff
        se = np.sqrt(0.05 * 0.95 * (1 / n_same + 1 / n_diff))
        assert abs(r1 - r2) <= 3 * se


def test_csbm_equal_means_features_uninformative():
    accs = []
    for seed in range(10):
        g = gen_csbm(CsbmParams(n=400, d=16, p=0.0, q=0.0, seed=seed))
        mask = random_split_mask(g.n, 0.5, seed)
        clf = fit_linear_classifier(g.features, g.labels, mask)
        accs.append(accuracy(predict(clf, g.features), g.labels, ~mask))
    assert abs(np.mean(accs) - 0.5) < 0.05


def test_csbm_deterministic_with_metadata():
    a = gen_csbm(CsbmParams(seed=3))
    b = gen_csbm(CsbmParams(seed=3))
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.features, b.features)
    assert a.meta["seed"] == 3 and a.meta["kind"] == "csbm"


def test_node_graph_roundtrip(tmp_path):
    g = gen_csbm(CsbmParams(n=50, d=3, seed=1))
    write_node_graph(g, tmp_path)
    write_meta(tmp_path / "meta.json", g.meta)
    h = load_node_graph(tmp_path)
    assert h.n == g.n
    order = [h.node_ids.index(x) for x in g.node_ids]
    np.testing.assert_array_equal(h.labels[order], g.labels)
    np.testing.assert_allclose(h.features[order], g.features)
    inv = np.argsort(order)
    remapped = {tuple(sorted((int(inv[a]), int(inv[b])))) for a, b in h.edges}
    assert remapped == {tuple(e) for e in g.edges.tolist()}
    assert json.loads((tmp_path / "meta.json").read_text())["n"] == 50


def test_missing_label_is_error(tmp_path):
    write_lines(tmp_path / "edges.tsv", ["a\tb"])
    write_lines(tmp_path / "labels.tsv", ["a\t1"])
    with pytest.raises(DataError, match="node b"):
        load_node_graph(tmp_path)
