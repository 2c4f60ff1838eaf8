"""Graph containers and sparse operators (adjacency, normalizations, Laplacians)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

DENSE_GUARD = 2000

KINDS = ("raw", "sym_norm", "sym_norm_selfloop", "laplacian", "neg_laplacian")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SparseOperator:
    """Symmetric n x n CSR matrix tagged with what it represents."""

    matrix: sp.csr_matrix
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown operator kind {self.kind!r}")
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def check(self, tol: float = 1e-12) -> None:
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            raise GraphError("operator must be square")
        if m.nnz and abs(m - m.T).max() > tol:
            raise GraphError("operator is not symmetric")
        if self.kind in ("laplacian", "neg_laplacian"):
            rows = np.asarray(m.sum(axis=1)).ravel()
            if rows.size and np.abs(rows).max() > tol:
                raise GraphError("Laplacian rows do not sum to zero")
        elif self.kind.startswith("sym_norm") and m.nnz and m.data.min() < 0:
            raise GraphError("normalized adjacency has negative entries")


@dataclass
class InteractionGraph:
    """Bipartite user-item graph.

    ``edges`` and ``test_edges`` are (m, 2) integer arrays of
    (user index, item index) pairs. Items are indexed from 0 within their
    block; node ids in the joint graph are ``user`` and ``n_users + item``.
    """

    n_users: int
    n_items: int
    edges: np.ndarray
    test_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    user_ids: Optional[list] = None
    item_ids: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = _as_pairs(self.edges)
        self.test_edges = _as_pairs(self.test_edges)
        for name, e in (("train", self.edges), ("test", self.test_edges)):
            if len(e) == 0:
                continue
            if e.min() < 0 or e[:, 0].max() >= self.n_users or e[:, 1].max() >= self.n_items:
                raise GraphError(f"{name} edge index out of range")
            keys = e[:, 0] * self.n_items + e[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise GraphError(f"duplicate (user, item) pair in {name} split")
        if len(self.edges) and len(self.test_edges):
            k_tr = self.edges[:, 0] * self.n_items + self.edges[:, 1]
            k_te = self.test_edges[:, 0] * self.n_items + self.test_edges[:, 1]
            if np.intersect1d(k_tr, k_te).size:
                raise GraphError("train and test splits overlap")
        if self.user_ids is None:
            self.user_ids = [str(u) for u in range(self.n_users)]
        if self.item_ids is None:
            self.item_ids = [str(i) for i in range(self.n_items)]

    @property
    def n(self) -> int:
        return self.n_users + self.n_items

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        """Per-node training degree, users first then items."""
        du = np.bincount(self.edges[:, 0], minlength=self.n_users)
        di = np.bincount(self.edges[:, 1], minlength=self.n_items)
        return np.concatenate([du, di]).astype(np.int64)

    @property
    def user_degrees(self) -> np.ndarray:
        return self.degrees[: self.n_users]

    def interaction_matrix(self, split: str = "train") -> sp.csr_matrix:
        e = self.edges if split == "train" else self.test_edges
        data = np.ones(len(e))
        return sp.csr_matrix((data, (e[:, 0], e[:, 1])), shape=(self.n_users, self.n_items))

    def user_items(self, split: str = "train") -> list:
        r = self.interaction_matrix(split)
        return [r.indices[r.indptr[u] : r.indptr[u + 1]] for u in range(self.n_users)]


@dataclass
class PlainGraph:
    """Undirected graph for the node-classification path."""

    n: int
    edges: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    node_ids: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        e = _as_pairs(self.edges)
        e = e[e[:, 0] != e[:, 1]]
        if len(e) and (e.min() < 0 or e.max() >= self.n):
            raise GraphError("edge index out of range")
        # canonical undirected form: u < v, unique
        e = np.sort(e, axis=1)
        self.edges = np.unique(e, axis=0) if len(e) else e
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.n:
                raise GraphError("feature rows must equal node count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.node_ids is None:
            self.node_ids = [str(i) for i in range(self.n)]

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n).astype(np.int64)

    def directed_edges(self) -> np.ndarray:
        return np.concatenate([self.edges, self.edges[:, ::-1]])


def _as_pairs(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.int64)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return e.reshape(-1, 2)


def pair_adjacency(pairs: np.ndarray, n: int) -> sp.csr_matrix:
    """Symmetric (weighted by multiplicity) adjacency from node pairs."""
    pairs = _as_pairs(pairs)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    a.sum_duplicates()
    return a


def build_adjacency(g: InteractionGraph | PlainGraph) -> SparseOperator:
    """Raw 0/1 adjacency; bipartite block layout for interaction graphs."""
    if isinstance(g, InteractionGraph):
        pairs = g.edges.copy()
        pairs[:, 1] += g.n_users
    else:
        pairs = g.edges
    return SparseOperator(pair_adjacency(pairs, g.n), "raw")


def normalize_sym(a: SparseOperator, self_loop: bool = False, allow_isolated: bool = False) -> SparseOperator:
    """D^-1/2 A D^-1/2, or (D+I)^-1/2 (A+I) (D+I)^-1/2 with ``self_loop``.

    Without self-loops a degree-0 node is an error unless ``allow_isolated``,
    in which case its row and column are left empty.
    """
    if a.kind != "raw":
        raise GraphError(f"expected raw adjacency, got {a.kind}")
    m = a.matrix
    if self_loop:
        m = m + sp.identity(a.n, format="csr")
    deg = np.asarray(m.sum(axis=1)).ravel()
    zero = deg == 0
    if zero.any() and not allow_isolated:
        raise GraphError(f"node {int(np.flatnonzero(zero)[0])} has degree 0; cannot normalize without self-loops")
    inv = np.zeros_like(deg)
    inv[~zero] = 1.0 / np.sqrt(deg[~zero])
    d = sp.diags(inv)
    return SparseOperator(d @ m @ d, "sym_norm_selfloop" if self_loop else "sym_norm")


def laplacian(a: SparseOperator, kind: str = "laplacian") -> SparseOperator:
    """D - A."""
    deg = np.asarray(a.matrix.sum(axis=1)).ravel()
    return SparseOperator(sp.diags(deg) - a.matrix, kind)


def pair_laplacian(pairs: np.ndarray, n: int, kind: str = "laplacian") -> SparseOperator:
    return laplacian(SparseOperator(pair_adjacency(pairs, n), "raw"), kind)


def sample_negatives(
    anchors: np.ndarray,
    forbidden: sp.csr_matrix,
    n_candidates: int,
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``k`` distinct candidates per anchor, uniformly, avoiding ``forbidden``.

    ``forbidden`` is a (n_anchor_space, n_candidates) boolean-like CSR; row
    ``a`` lists candidates that anchor ``a`` may not draw. Returns an
    (len(anchors), k) array of candidate indices.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    if k < 1:
        raise GraphError("K must be >= 1")
    n_forb = np.diff(forbidden.indptr)[anchors]
    short = np.flatnonzero(n_candidates - n_forb < k)
    if short.size:
        raise GraphError(
            f"anchor {int(anchors[short[0]])} has fewer than {k} legal negatives"
        )
    fkeys = _row_keys(forbidden, n_candidates)
    out = rng.integers(0, n_candidates, size=(len(anchors), k))
    rows = np.repeat(anchors, k).reshape(len(anchors), k)
    while True:
        keys = rows * n_candidates + out
        bad = _isin_sorted(keys, fkeys)
        if k > 1:
            srt = np.sort(out, axis=1)
            dup_rows = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
            if dup_rows.size:
                # redraw later duplicates within the row
                for r in dup_rows:
                    _, first = np.unique(out[r], return_index=True)
                    mask = np.ones(k, dtype=bool)
                    mask[first] = False
                    bad[r] |= mask
        if not bad.any():
            return out
        out[bad] = rng.integers(0, n_candidates, size=int(bad.sum()))


def _row_keys(m: sp.csr_matrix, width: int) -> np.ndarray:
    rows = np.repeat(np.arange(m.shape[0], dtype=np.int64), np.diff(m.indptr))
    return np.sort(rows * width + m.indices.astype(np.int64))


def _isin_sorted(keys: np.ndarray, sorted_keys: np.ndarray) -> np.ndarray:
    if sorted_keys.size == 0:
        return np.zeros(keys.shape, dtype=bool)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, sorted_keys.size - 1)
    return sorted_keys[pos] == keys


def negative_pairs(g: InteractionGraph | PlainGraph, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sampled (anchor, negative) node pairs.

    Interaction graphs anchor on every user and draw items outside N_u;
    plain graphs anchor on every node and draw non-adjacent nodes other
    than the anchor itself.
    """
    if isinstance(g, InteractionGraph):
        anchors = np.arange(g.n_users)
        neg = sample_negatives(anchors, g.interaction_matrix(), g.n_items, k, rng)
        return np.column_stack([np.repeat(anchors, k), neg.ravel() + g.n_users])
    anchors = np.arange(g.n)
    forb = build_adjacency(g).matrix + sp.identity(g.n, format="csr")
    neg = sample_negatives(anchors, sp.csr_matrix(forb), g.n, k, rng)
    return np.column_stack([np.repeat(anchors, k), neg.ravel()])


def sample_negative_laplacian(g: InteractionGraph | PlainGraph, k: int, rng_seed: int) -> SparseOperator:
    """Laplacian of a freshly sampled negative-pair graph (K pairs per anchor)."""
    rng = np.random.default_rng(rng_seed)
    return pair_laplacian(negative_pairs(g, k, rng), g.n, kind="neg_laplacian")


def walk_counts(a: SparseOperator, k: int) -> np.ndarray:
    """Exact A^k as an integer matrix (dense; small graphs only)."""
    if a.n > DENSE_GUARD:
        raise GraphError(
            f"walk_counts is a dense oracle limited to n <= {DENSE_GUARD}; use sparse propagation"
        )
    if k < 0:
        raise GraphError("walk length must be nonnegative")
    base = np.rint(a.toarray()).astype(np.int64)
    maxdeg = int(base.sum(axis=1).max()) if a.n else 0
    if k and maxdeg > 1 and k * np.log2(maxdeg) > 62:
        base = base.astype(object)
    out = np.eye(a.n, dtype=base.dtype)
    for _ in range(k):
        out = out @ base
    return out


def two_hop_count(a: SparseOperator, u: int) -> int:
    """Number of nodes at shortest-path distance exactly 2 from ``u``."""
    m = a.matrix
    nbrs = set(m.indices[m.indptr[u] : m.indptr[u + 1]].tolist())
    second = set()
    for w in nbrs:
        second.update(m.indices[m.indptr[w] : m.indptr[w + 1]].tolist())
    second -= nbrs
    second.discard(u)
    return len(second)


def drop_isolated_items(
    n_users: int, n_items: int, edges: np.ndarray, item_ids: Sequence | None = None
) -> tuple[int, np.ndarray, list | None, np.ndarray]:
    """Remove items with no training edge and reindex the rest.

    Returns ``(n_items, edges, item_ids, keep_mask)``.
    """
    deg = np.bincount(edges[:, 1], minlength=n_items) if len(edges) else np.zeros(n_items, int)
    keep = deg > 0
    if keep.all():
        return n_items, edges, list(item_ids) if item_ids is not None else None, keep
    logger.warning("dropping %d isolated items", int((~keep).sum()))
    remap = np.cumsum(keep) - 1
    edges = edges.copy()
    edges[:, 1] = remap[edges[:, 1]]
    ids = [x for x, k in zip(item_ids, keep) if k] if item_ids is not None else None
    return int(keep.sum()), edges, ids, keep


def negative_sampler(g: InteractionGraph | PlainGraph, k: int, rng: np.random.Generator):
    """Callable mapping anchor node ids to (len(anchors), k) negative node ids."""
    if isinstance(g, InteractionGraph):
        forb = g.interaction_matrix()
        offset = g.n_users

        def draw(anchors):
            return sample_negatives(np.asarray(anchors), forb, g.n_items, k, rng) + offset

        return draw
    forb = sp.csr_matrix(build_adjacency(g).matrix + sp.identity(g.n, format="csr"))

    def draw(anchors):
        return sample_negatives(np.asarray(anchors), forb, g.n, k, rng)

    return draw
