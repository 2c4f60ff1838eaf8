import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from grgcl.graph import (
    DENSE_GUARD,
    GraphError,
    InteractionGraph,
    PlainGraph,
    SparseOperator,
    build_adjacency,
    laplacian,
    negative_pairs,
    normalize_sym,
    sample_negative_laplacian,
    two_hop_count,
    walk_counts,
)

from conftest import random_interactions, random_plain


def path3():
    return PlainGraph(3, [(0, 1), (1, 2)])


def triangle():
    return PlainGraph(3, [(0, 1), (1, 2), (0, 2)])


# -- InteractionGraph validation


def test_rejects_out_of_range_indices():
    with pytest.raises(GraphError):
        InteractionGraph(1, 1, [(0, 1)])
    with pytest.raises(GraphError):
        InteractionGraph(1, 1, [(1, 0)])


def test_rejects_duplicate_edges():
    with pytest.raises(GraphError):
        InteractionGraph(1, 2, [(0, 0), (0, 0)])


def test_rejects_train_test_overlap():
    with pytest.raises(GraphError):
        InteractionGraph(1, 2, [(0, 0)], test_edges=[(0, 0)])


def test_degrees_sum_to_twice_edges():
    g = random_interactions(7, 11, 0.3, seed=1)
    assert g.degrees.sum() == 2 * g.m


# -- build_adjacency


def test_single_edge_adjacency():
    a = build_adjacency(InteractionGraph(1, 1, [(0, 0)]))
    assert a.kind == "raw"
    np.testing.assert_array_equal(a.toarray(), [[0, 1], [1, 0]])


def test_star_degrees():
    g = InteractionGraph(2, 1, [(0, 0), (1, 0)])
    np.testing.assert_array_equal(g.degrees, [1, 1, 2])
    np.testing.assert_array_equal(np.asarray(build_adjacency(g).matrix.sum(axis=1)).ravel(), [1, 1, 2])


def test_adjacency_structure_and_block_roundtrip():
    g = random_interactions(9, 13, 0.25, seed=2)
    a = build_adjacency(g)
    dense = a.toarray()
    assert a.matrix.nnz == 2 * g.m
    assert np.all(np.diag(dense) == 0)
    np.testing.assert_array_equal(dense, dense.T)
    r = dense[: g.n_users, g.n_users :]
    np.testing.assert_array_equal(r, g.interaction_matrix().toarray())
    assert not dense[: g.n_users, : g.n_users].any()
    assert not dense[g.n_users :, g.n_users :].any()


def test_csr_is_sorted_and_float64():
    a = build_adjacency(random_interactions(5, 6, 0.4, seed=3))
    assert a.matrix.dtype == np.float64
    assert a.matrix.has_sorted_indices


# -- normalize_sym


def test_normalize_single_edge():
    a = build_adjacency(PlainGraph(2, [(0, 1)]))
    np.testing.assert_allclose(normalize_sym(a).toarray(), [[0, 1], [1, 0]])


def test_normalize_path():
    m = normalize_sym(build_adjacency(path3())).toarray()
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(m, [[0, s, 0], [s, 0, s], [0, s, 0]], atol=1e-15)


def test_normalize_selfloop_single_edge():
    m = normalize_sym(build_adjacency(PlainGraph(2, [(0, 1)])), self_loop=True)
    assert m.kind == "sym_norm_selfloop"
    np.testing.assert_allclose(m.toarray(), np.full((2, 2), 0.5))


def test_normalize_isolated_node_named():
    a = build_adjacency(PlainGraph(3, [(0, 1)]))
    with pytest.raises(GraphError, match="node 2"):
        normalize_sym(a)
    # self-loops make the isolated node legal
    normalize_sym(a, self_loop=True).check()


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 40), st.floats(0.05, 0.6), st.integers(0, 10_000), st.booleans())
def test_normalized_spectral_bound(n, p, seed, loop):
    op = normalize_sym(build_adjacency(random_plain(n, p, seed)), self_loop=loop)
    op.check()
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 100))
    v /= np.linalg.norm(v, axis=0)
    assert np.all(np.abs(np.einsum("ij,ij->j", v, op.apply(v))) <= 1 + 1e-9)


# -- laplacian


def test_laplacian_examples():
    np.testing.assert_array_equal(laplacian(build_adjacency(PlainGraph(2, [(0, 1)]))).toarray(), [[1, -1], [-1, 1]])
    np.testing.assert_array_equal(laplacian(build_adjacency(PlainGraph(4, []))).toarray(), np.zeros((4, 4)))
    np.testing.assert_array_equal(
        laplacian(build_adjacency(triangle())).toarray(), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]]
    )


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(4, 30), st.integers(0, 10_000))
def test_laplacian_annihilates_ones(nu, ni, seed):
    g = random_interactions(nu, ni, 0.3, seed)
    for op in (laplacian(build_adjacency(g)), sample_negative_laplacian(g, 1, seed)):
        op.check()
        assert np.abs(op.apply(np.ones(g.n))).max() <= 1e-12


# -- negative sampling


def test_negative_laplacian_single_choice():
    g = InteractionGraph(1, 2, [(0, 0)])
    lneg = sample_negative_laplacian(g, 1, rng_seed=0)
    assert lneg.kind == "neg_laplacian"
    np.testing.assert_array_equal(lneg.toarray(), [[1, 0, -1], [0, 0, 0], [-1, 0, 1]])


def test_negative_laplacian_trace_matches_pair_enumeration():
    g = random_interactions(5, 10, 0.3, seed=4)
    rng = np.random.default_rng(9)
    pairs = negative_pairs(g, 2, rng)
    # brute force: each distinct pair adds 1 to both endpoint degrees
    uniq = {tuple(p) for p in pairs.tolist()}
    assert len(uniq) == len(pairs) == 2 * g.n_users
    lneg = sample_negative_laplacian(g, 2, rng_seed=9)
    assert lneg.toarray().trace() == pytest.approx(2 * g.n_users * 2)
    for u, j in pairs:
        assert j >= g.n_users
        assert (j - g.n_users) not in set(g.user_items()[u].tolist())


def test_negative_sampling_respects_neighbourhoods_and_k():
    g = random_interactions(20, 15, 0.4, seed=5)
    pairs = negative_pairs(g, 3, np.random.default_rng(0)).reshape(g.n_users, 3, 2)
    items = g.user_items()
    for u in range(g.n_users):
        neg = pairs[u, :, 1] - g.n_users
        assert len(set(neg.tolist())) == 3
        assert not set(neg.tolist()) & set(items[u].tolist())


def test_negative_sampling_full_user_named():
    g = InteractionGraph(2, 2, [(0, 0), (0, 1), (1, 0)])
    with pytest.raises(GraphError, match="anchor 0"):
        sample_negative_laplacian(g, 1, 0)


def test_negative_sampling_deterministic_and_seed_sensitive():
    g = random_interactions(12, 20, 0.2, seed=6)
    a = sample_negative_laplacian(g, 1, 3).matrix
    b = sample_negative_laplacian(g, 1, 3).matrix
    c = sample_negative_laplacian(g, 1, 4).matrix
    assert (a != b).nnz == 0
    assert (a != c).nnz > 0


def test_negative_sampling_is_uniform():
    # one user, 4 items, one neighbour: the 3 legal items are equally likely
    g = InteractionGraph(1, 4, [(0, 0)])
    draws = negative_pairs(g, 1, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    counts = np.zeros(4)
    for _ in range(3000):
        counts[negative_pairs(g, 1, rng)[0, 1] - 1] += 1
    assert counts[0] == 0
    assert draws.shape == (1, 2)
    expected = 1000
    chi2 = ((counts[1:] - expected) ** 2 / expected).sum()
    assert chi2 < 13.8  # chi-square, 2 dof, p = 0.001


def test_plain_graph_negatives_exclude_self_and_neighbours():
    g = random_plain(15, 0.2, seed=1)
    adj = build_adjacency(g).toarray()
    pairs = negative_pairs(g, 2, np.random.default_rng(0))
    assert np.all(pairs[:, 0] != pairs[:, 1])
    assert not adj[pairs[:, 0], pairs[:, 1]].any()


# -- walk counts


def test_walk_counts_examples():
    a = build_adjacency(triangle())
    np.testing.assert_array_equal(walk_counts(a, 0), np.eye(3))
    np.testing.assert_array_equal(walk_counts(a, 2), [[2, 1, 1], [1, 2, 1], [1, 1, 2]])
    w = walk_counts(build_adjacency(path3()), 2)
    assert w[0, 2] == 1 and w[0, 0] == 1


def test_walk_counts_match_float_power():
    a = build_adjacency(random_plain(12, 0.3, seed=2))
    np.testing.assert_array_equal(walk_counts(a, 4), np.linalg.matrix_power(a.toarray(), 4))


def test_walk_counts_guard():
    big = SparseOperator(sp.csr_matrix((DENSE_GUARD + 1, DENSE_GUARD + 1)), "raw")
    with pytest.raises(GraphError, match="dense"):
        walk_counts(big, 1)


def test_two_hop_count():
    star = PlainGraph(4, [(0, 1), (0, 2), (0, 3)])
    a = build_adjacency(star)
    assert two_hop_count(a, 0) == 0
    assert two_hop_count(a, 1) == 2
    assert two_hop_count(build_adjacency(triangle()), 0) == 0


def test_operator_check_rejects_asymmetric():
    with pytest.raises(GraphError):
        SparseOperator(sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]])), "raw").check()


def test_normalize_allow_isolated_leaves_zero_row():
    a = build_adjacency(PlainGraph(3, [(0, 1)]))
    m = normalize_sym(a, allow_isolated=True)
    np.testing.assert_array_equal(m.toarray()[2], 0)
    np.testing.assert_allclose(m.toarray()[:2, :2], [[0, 1], [1, 0]])
