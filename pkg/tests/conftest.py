import numpy as np
import pytest

from grgcl.graph import InteractionGraph, PlainGraph


def random_interactions(n_users, n_items, density, seed, min_deg=1):
    """Random bipartite graph where every user and item has an edge and
    every user keeps at least one non-neighbour item (redrawn until so)."""
    rng = np.random.default_rng(seed)
    for _ in range(10_000):
        r = rng.random((n_users, n_items)) < density
        r[np.arange(n_users), rng.integers(0, n_items, n_users)] = True
        r[rng.integers(0, n_users, n_items), np.arange(n_items)] = True
        deg = r.sum(axis=1)
        if deg.min() >= min_deg and deg.max() < n_items:
            u, i = np.nonzero(r)
            return InteractionGraph(n_users, n_items, np.column_stack([u, i]))
    raise RuntimeError("could not draw a valid graph")


def random_plain(n, p, seed, connected=True):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = np.column_stack([iu[keep], ju[keep]])
    if connected:
        # random spanning tree so no node is isolated
        order = rng.permutation(n)
        tree = [(order[k], order[rng.integers(0, k)]) for k in range(1, n)]
        edges = np.concatenate([edges, np.array(tree, dtype=np.int64).reshape(-1, 2)])
    return PlainGraph(n, edges)


def random_tree(n, seed):
    rng = np.random.default_rng(seed)
    return PlainGraph(n, [(k, int(rng.integers(0, k))) for k in range(1, n)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
