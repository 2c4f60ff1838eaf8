"""Loss terms with analytic gradients w.r.t. the final embeddings E.

Every loss returns a :class:`LossOutput` whose ``grad`` has the shape of E
and is zero on rows the loss does not touch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

import scipy.sparse as sp

from .graph import SparseOperator, pair_laplacian


class LossError(ValueError):
    pass


@dataclass
class TrainingBatch:
    """Positive edges grouped by anchor, with K negatives shared per anchor.

    All indices are node ids in the joint graph. Edge ``r`` pairs anchor
    ``anchors[edge_anchor[r]]`` with ``positives[r]``; the anchor's negatives
    are ``negatives[edge_anchor[r]]``.
    """

    anchors: np.ndarray
    edge_anchor: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64)
        self.edge_anchor = np.asarray(self.edge_anchor, dtype=np.int64)
        self.positives = np.asarray(self.positives, dtype=np.int64)
        neg = np.asarray(self.negatives, dtype=np.int64)
        width = neg.shape[-1] if neg.ndim == 2 else -1
        self.negatives = neg.reshape(len(self.anchors), width)
        if len(self.edge_anchor) != len(self.positives):
            raise LossError("one anchor slot per positive edge required")
        if len(self.anchors) and self.negatives.shape[1] < 1:
            raise LossError("K must be >= 1")

    @classmethod
    def from_edges(cls, users: np.ndarray, positives: np.ndarray, negatives_for) -> "TrainingBatch":
        """Group edge rows by user; ``negatives_for(anchors)`` returns (a, K) ids."""
        anchors, edge_anchor = np.unique(np.asarray(users, dtype=np.int64), return_inverse=True)
        return cls(anchors, edge_anchor, positives, negatives_for(anchors))

    @classmethod
    def from_rows(cls, users: np.ndarray, positives: np.ndarray, negatives_for) -> "TrainingBatch":
        """One anchor slot per edge row, each with its own K negatives."""
        users = np.asarray(users, dtype=np.int64)
        return cls(users, np.arange(len(users)), positives, negatives_for(users))

    @property
    def k(self) -> int:
        return self.negatives.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.positives)

    @property
    def edge_users(self) -> np.ndarray:
        return self.anchors[self.edge_anchor]

    def positive_pairs(self) -> np.ndarray:
        return np.column_stack([self.edge_users, self.positives])

    def negative_pairs(self) -> np.ndarray:
        return np.column_stack([np.repeat(self.anchors, self.k), self.negatives.ravel()])

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.k
        u = np.repeat(self.edge_users, k)
        i = np.repeat(self.positives, k)
        j = self.negatives[self.edge_anchor].ravel()
        return u, i, j

    def items(self) -> np.ndarray:
        return np.unique(np.concatenate([self.positives, self.negatives.ravel()]))


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict)

    def __add__(self, other: "LossOutput") -> "LossOutput":
        return LossOutput(self.value + other.value, self.grad + other.grad, {**self.parts, **other.parts})

    def scaled(self, w: float) -> "LossOutput":
        return LossOutput(w * self.value, w * self.grad, dict(self.parts))


def softplus(x: np.ndarray) -> np.ndarray:
    """ln(1 + exp(x)), stable for either sign."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(-np.abs(x))))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def score(e: np.ndarray, u: int, i: int) -> float:
    return float(e[u] @ e[i])


def scatter_rows(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum ``vals`` rows into an (n, d) array at row indices ``idx``."""
    s = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(s @ vals)


def _rowdot(e: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", e[a], e[b])


def bpr_loss(e: np.ndarray, batch: TrainingBatch, lam: float = 0.0, e0_sq_norm: float = 0.0) -> LossOutput:
    """-sum ln sigmoid(y_ui - y_uj) + lam * |E0|^2 over the batch triples.

    The gradient covers the ranking term only; the L2 term's gradient
    belongs to E0 and is added by the optimizer.
    """
    u, i, j = batch.triples()
    x = _rowdot(e, u, i) - _rowdot(e, u, j)
    value = float(softplus(-x).sum())
    c = sigmoid(x) - 1.0
    eu = c[:, None] * e[u]
    n = e.shape[0]
    grad = scatter_rows(n, u, c[:, None] * (e[i] - e[j])) + scatter_rows(n, i, eu) - scatter_rows(n, j, eu)
    l2 = lam * e0_sq_norm
    return LossOutput(value + l2, grad, {"bpr": value, "l2": l2})


def bpr_split(e: np.ndarray, batch: TrainingBatch) -> tuple[float, float]:
    """Positive part -K sum y_ui and negative part sum ln(e^y_ui + e^y_uj)."""
    u, i, j = batch.triples()
    yi = _rowdot(e, u, i)
    yj = _rowdot(e, u, j)
    return float(-yi.sum()), float(np.logaddexp(yi, yj).sum())


def quadratic_form(e: np.ndarray, lap: SparseOperator) -> float:
    return float(np.einsum("ij,ij->", e, lap.apply(e)))


def coles_loss(e: np.ndarray, l_pos: SparseOperator, l_neg: SparseOperator, beta: float) -> LossOutput:
    """Tr(E^T L E) - beta Tr(E^T L- E)."""
    for op in (l_pos, l_neg):
        if op.kind not in ("laplacian", "neg_laplacian"):
            raise LossError(f"COLES needs Laplacian operators, got {op.kind}")
        if op.n != e.shape[0]:
            raise LossError(f"operator is {op.n}x{op.n} but E has {e.shape[0]} rows")
    lp = l_pos.apply(e)
    ln = l_neg.apply(e)
    pos = float(np.einsum("ij,ij->", e, lp))
    neg = float(np.einsum("ij,ij->", e, ln))
    return LossOutput(pos - beta * neg, 2.0 * (lp - beta * ln), {"coles_pos": pos, "coles_neg": neg})


def coles_smoothness(e: np.ndarray, pairs: np.ndarray) -> float:
    """Sum of squared distances over listed node pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    diff = e[pairs[:, 0]] - e[pairs[:, 1]]
    return float(np.einsum("ij,ij->", diff, diff))


def batch_laplacians(batch: TrainingBatch, n: int) -> tuple[SparseOperator, SparseOperator]:
    """Laplacians of the batch's positive edges and sampled negative pairs."""
    return (
        pair_laplacian(batch.positive_pairs(), n),
        pair_laplacian(batch.negative_pairs(), n, kind="neg_laplacian"),
    )


def _gaussian_potential(x: np.ndarray, t: float) -> tuple[float, np.ndarray]:
    # sum over ordered pairs of exp(-t |x_a - x_b|^2) and its gradient
    sq = np.einsum("ij,ij->i", x, x)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(dist, 0.0)
    w = np.exp(-t * dist)
    grad = -4.0 * t * (w.sum(axis=1)[:, None] * x - w @ x)
    return float(w.sum()), grad


def hom_reg(e: np.ndarray, user_set, item_set, t: float) -> LossOutput:
    """Gaussian potentials within the user set plus within the item set.

    Ordered pairs, self-pairs included.
    """
    if t <= 0:
        raise LossError("t must be positive")
    grad = np.zeros_like(e)
    value = 0.0
    for nodes in (user_set, item_set):
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        if nodes.size == 0:
            continue
        v, g = _gaussian_potential(e[nodes], t)
        value += v
        grad[nodes] += g
    return LossOutput(value, grad, {"hom": value})


def het_reg(e: np.ndarray, batch: TrainingBatch, t: float) -> LossOutput:
    """sum over (u, i, j) triples of exp(-t |e_i - e_j|^2)."""
    if t <= 0:
        raise LossError("t must be positive")
    _, i, j = batch.triples()
    diff = e[i] - e[j]
    w = np.exp(-t * np.einsum("ij,ij->i", diff, diff))
    gi = (-2.0 * t * w)[:, None] * diff
    grad = scatter_rows(e.shape[0], i, gi) - scatter_rows(e.shape[0], j, gi)
    value = float(w.sum())
    return LossOutput(value, grad, {"het": value})


def gr_coles_loss(
    e: np.ndarray,
    batch: TrainingBatch,
    l_pos_batch: Optional[SparseOperator] = None,
    l_neg_batch: Optional[SparseOperator] = None,
    beta: float = 0.9,
    t: float = 2.0,
    coles_weight: float = 1.0,
    reg_weight: float = 1.0,
) -> LossOutput:
    """Batch COLES plus homogeneous and heterogeneous debias regularizers.

    Hom sets are the batch's distinct anchors and distinct items. The
    weights default to 1 and exist for ablations.
    """
    if l_pos_batch is None or l_neg_batch is None:
        l_pos_batch, l_neg_batch = batch_laplacians(batch, e.shape[0])
    out = coles_loss(e, l_pos_batch, l_neg_batch, beta).scaled(coles_weight)
    if reg_weight:
        out = out + hom_reg(e, batch.anchors, batch.items(), t).scaled(reg_weight)
        out = out + het_reg(e, batch, t).scaled(reg_weight)
    else:
        out.parts.update(hom=0.0, het=0.0)
    return out
