"""BPR <-> COLES sandwich bounds, per-part inequality audits, and beta ratios."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import mpmath
import numpy as np

from .graph import InteractionGraph, negative_sampler
from .losses import TrainingBatch, bpr_loss, bpr_split, coles_smoothness

SLACK = 1e-9
NORM_TOL = 1e-6

with mpmath.workdps(50):
    _E = mpmath.e
    # chord slope of ln(e + e^y) over y in [-1, 1]
    LN_CHORD = float(mpmath.log(2 * _E**2 / (_E**2 + 1)))
    # ln((2e^3 + 2e) / (e^2 + 1)) factors to ln(2e)
    LN_2E = float(mpmath.log((2 * _E**3 + 2 * _E) / (_E**2 + 1)))
    LN_E_PLUS_INV_E = float(mpmath.log(_E + 1 / _E))


class BoundsError(ValueError):
    pass


@dataclass
class BoundReport:
    bpr: float
    bpr_pos: float
    bpr_neg: float
    coles_pos: float
    coles_neg: float
    lower: float
    upper: float
    beta_l: float
    beta_u: float
    d_min: int
    d_max: int
    K: int
    n_u_batch: int
    m_batch: int
    sandwich_ok: bool
    pos_identity_residual: float
    neg_lower: float
    neg_upper: float
    neg_lower_ok: bool
    neg_upper_ok: bool

    def to_dict(self) -> dict:
        return asdict(self)


def theorem_bounds(
    coles_pos: float, coles_neg: float, d_min: float, d_max: float, k: int, n_u: int, m: int
) -> tuple[float, float]:
    """Lower and upper affine COLES bounds on the BPR loss."""
    if d_min < 1 or k < 1:
        raise BoundsError("need d_min >= 1 and K >= 1")
    lower = 0.5 * k * coles_pos - 0.5 * d_min * coles_neg + d_min * k * n_u - m * k
    upper = 0.5 * k * coles_pos - 0.25 * d_max * LN_CHORD * coles_neg + d_max * k * n_u * LN_2E - m * k
    return lower, upper


def negative_part_bounds(coles_neg: float, d_min: float, d_max: float, k: int, n_u: int) -> tuple[float, float]:
    lo = -0.5 * d_min * coles_neg + d_min * k * n_u
    hi = 0.5 * d_max * LN_CHORD * (2 * k * n_u - 0.5 * coles_neg) + d_max * k * n_u * LN_E_PLUS_INV_E
    return lo, hi


def beta_coefficients(d_min: float, d_max: float) -> tuple[float, float]:
    return float(d_min), 0.5 * d_max * LN_CHORD


def beta_ratio(d_min: float, d_max: float) -> float:
    beta_l, beta_u = beta_coefficients(d_min, d_max)
    return beta_u / beta_l


def audit_batch(e: np.ndarray, batch: TrainingBatch, degrees: np.ndarray) -> BoundReport:
    """Evaluate every bound quantity on one batch.

    ``degrees`` are full-graph training degrees indexed by node id; the
    extrema are taken over the batch's anchors.
    """
    norms = np.linalg.norm(e, axis=1)
    touched = np.unique(np.concatenate([batch.anchors, batch.positives, batch.negatives.ravel()]))
    off = touched[np.abs(norms[touched] - 1.0) > NORM_TOL]
    if off.size:
        raise BoundsError(f"node {int(off[0])} is not unit-norm (|e| = {norms[off[0]]:.6g})")
    if len(batch.anchors) == 0:
        raise BoundsError("empty batch")
    k = batch.k
    n_u = len(batch.anchors)
    m = batch.num_edges
    d = np.asarray(degrees)[batch.anchors]
    d_min, d_max = int(d.min()), int(d.max())

    bpr = bpr_loss(e, batch).value
    bpr_pos, bpr_neg = bpr_split(e, batch)
    coles_pos = coles_smoothness(e, batch.positive_pairs())
    coles_neg = coles_smoothness(e, batch.negative_pairs())
    lower, upper = theorem_bounds(coles_pos, coles_neg, d_min, d_max, k, n_u, m)
    neg_lo, neg_hi = negative_part_bounds(coles_neg, d_min, d_max, k, n_u)
    beta_l, beta_u = beta_coefficients(d_min, d_max)
    residual = abs(bpr_pos - (0.5 * k * coles_pos - m * k)) / (1.0 + abs(bpr_pos))
    return BoundReport(
        bpr=bpr,
        bpr_pos=bpr_pos,
        bpr_neg=bpr_neg,
        coles_pos=coles_pos,
        coles_neg=coles_neg,
        lower=lower,
        upper=upper,
        beta_l=beta_l,
        beta_u=beta_u,
        d_min=d_min,
        d_max=d_max,
        K=k,
        n_u_batch=n_u,
        m_batch=m,
        sandwich_ok=bool(lower - SLACK <= bpr <= upper + SLACK),
        pos_identity_residual=residual,
        neg_lower=neg_lo,
        neg_upper=neg_hi,
        neg_lower_ok=bool(bpr_neg >= neg_lo - SLACK),
        neg_upper_ok=bool(bpr_neg <= neg_hi + SLACK),
    )


def sample_audit_batch(
    graph: InteractionGraph, n_anchors: int, k: int, rng: np.random.Generator
) -> TrainingBatch:
    """Anchors drawn uniformly, each with all of its training edges.

    Because every anchor brings its full neighborhood, the per-anchor edge
    count equals its graph degree, so degree extrema and batch structure
    agree.
    """
    users = graph.user_items()
    active = np.flatnonzero(graph.user_degrees > 0)
    anchors = np.sort(rng.choice(active, size=min(n_anchors, len(active)), replace=False))
    edge_users = np.concatenate([np.full(len(users[u]), u) for u in anchors])
    positives = np.concatenate([users[u] for u in anchors]) + graph.n_users
    sampler = negative_sampler(graph, k, rng)
    return TrainingBatch.from_edges(edge_users, positives, sampler)


def sample_edge_batch(graph: InteractionGraph, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(graph.m, size=min(batch_size, graph.m), replace=False)
    return graph.edges[idx]


def beta_ratio_distribution(
    model,
    graph: InteractionGraph,
    num_batches: int = 1000,
    batch_size: int = 2048,
    seed: int = 0,
    bins: int = 50,
) -> dict:
    """Per-batch beta_u / beta_l from degree extrema of the batch's users.

    The ratio depends only on degrees; ``model`` is accepted for interface
    symmetry with the audit and is not read.
    """
    if num_batches < 1:
        raise BoundsError("num_batches must be >= 1")
    rng = np.random.default_rng(seed)
    deg = graph.user_degrees
    ratios = np.empty(num_batches)
    for b in range(num_batches):
        edges = sample_edge_batch(graph, batch_size, rng)
        if len(edges) == 0:
            raise BoundsError("empty batch")
        d = deg[np.unique(edges[:, 0])]
        ratios[b] = beta_ratio(d.min(), d.max())
    counts, edges_ = np.histogram(ratios, bins=bins)
    return {"ratios": ratios, "counts": counts, "bin_edges": edges_}


def audit_many(
    e: np.ndarray,
    graph: InteractionGraph,
    num_batches: int,
    n_anchors: int,
    k: int,
    seed: int,
) -> list[BoundReport]:
    rng = np.random.default_rng(seed)
    deg = np.concatenate([graph.user_degrees, np.zeros(graph.n_items, dtype=np.int64)])
    return [audit_batch(e, sample_audit_batch(graph, n_anchors, k, rng), deg) for _ in range(num_batches)]


def summarize(reports: list[BoundReport]) -> dict:
    return {
        "batches": len(reports),
        "sandwich_ok": sum(r.sandwich_ok for r in reports),
        "neg_lower_ok": sum(r.neg_lower_ok for r in reports),
        "neg_upper_ok": sum(r.neg_upper_ok for r in reports),
        "max_pos_identity_residual": max((r.pos_identity_residual for r in reports), default=0.0),
    }
