"""Linear propagation encoders and the relative-influence analyzer."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import (
    DENSE_GUARD,
    GraphError,
    InteractionGraph,
    PlainGraph,
    SparseOperator,
    build_adjacency,
    two_hop_count,
    walk_counts,
)

VARIANTS = ("layer_average", "selfloop_last")
INIT_STD = 0.1


class EncoderError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise EncoderError("embedding table must be 2-D")
        if not np.isfinite(self.matrix).all():
            raise EncoderError("embedding table has non-finite entries")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def init(cls, n: int, d: int, seed: int, std: float = INIT_STD) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, size=(n, d)))


@dataclass
class PropagationConfig:
    num_layers: int = 3
    layer_weights: Optional[np.ndarray] = None
    variant: str = "layer_average"
    normalize_output: bool = False

    def __post_init__(self):
        if self.num_layers < 0:
            raise EncoderError("num_layers must be >= 0")
        if self.variant not in VARIANTS:
            raise EncoderError(f"unknown variant {self.variant!r}")
        if self.layer_weights is None:
            if self.variant == "layer_average":
                w = np.full(self.num_layers + 1, 1.0 / (self.num_layers + 1))
            else:
                w = np.zeros(self.num_layers + 1)
                w[-1] = 1.0
        else:
            w = np.asarray(self.layer_weights, dtype=np.float64)
        if w.shape != (self.num_layers + 1,):
            raise EncoderError("need one layer weight per layer 0..L")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise EncoderError("layer weights must be nonnegative and sum to 1")
        self.layer_weights = w

    @property
    def operator_kind(self) -> str:
        return "sym_norm" if self.variant == "layer_average" else "sym_norm_selfloop"


@dataclass
class PropagationCache:
    n: int
    d: int
    num_layers: int
    pre_norm: Optional[np.ndarray] = None
    norms: Optional[np.ndarray] = None
    op_id: int = field(default=0)


def _check_op(op: SparseOperator, cfg: PropagationConfig, n: int) -> None:
    if op.kind != cfg.operator_kind:
        raise EncoderError(f"variant {cfg.variant} needs a {cfg.operator_kind} operator, got {op.kind}")
    if op.n != n:
        raise EncoderError(f"operator is {op.n}x{op.n} but table has {n} rows")


def _weighted_powers(op: SparseOperator, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # sum_l w_l op^l x
    out = weights[0] * x
    cur = x
    for w in weights[1:]:
        cur = op.apply(cur)
        if w:
            out = out + w * cur
    return out


def row_normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise EncoderError(f"node {int(zero[0])} has a zero embedding; cannot normalize")
    return z / norms[:, None], norms


def normalize_adjoint(g: np.ndarray, e: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Pull a gradient back through e = z / |z| row-wise."""
    radial = np.einsum("ij,ij->i", e, g)
    return (g - radial[:, None] * e) / norms[:, None]


def propagate(
    e0: EmbeddingTable | np.ndarray, op: SparseOperator, cfg: PropagationConfig
) -> tuple[np.ndarray, PropagationCache]:
    """Final embeddings ``sum_l alpha_l op^l E0``, optionally row-normalized."""
    x = e0.matrix if isinstance(e0, EmbeddingTable) else np.asarray(e0, dtype=np.float64)
    _check_op(op, cfg, x.shape[0])
    z = _weighted_powers(op, x, cfg.layer_weights)
    cache = PropagationCache(n=x.shape[0], d=x.shape[1], num_layers=cfg.num_layers, op_id=id(op))
    if cfg.normalize_output:
        e, norms = row_normalize(z)
        cache.pre_norm, cache.norms = z, norms
        return e, cache
    return z, cache


def propagate_backward(
    grad_e: np.ndarray, cache: PropagationCache, op: SparseOperator, cfg: PropagationConfig
) -> np.ndarray:
    """Gradient w.r.t. E0 given the gradient w.r.t. the propagated output."""
    if grad_e.shape != (cache.n, cache.d) or cache.num_layers != cfg.num_layers or cache.op_id != id(op):
        raise EncoderError("cache does not match this backward call")
    if cfg.normalize_output:
        if cache.norms is None:
            raise EncoderError("cache was produced without normalization")
        e = cache.pre_norm / cache.norms[:, None]
        grad_e = normalize_adjoint(grad_e, e, cache.norms)
    # op is symmetric, so the adjoint of op^l is op^l
    return _weighted_powers(op, grad_e, cfg.layer_weights)


def gcn_linear_onehot(e0: EmbeddingTable | np.ndarray, op: SparseOperator, num_layers: int) -> np.ndarray:
    """Dense linear GCN with X = I and W = E0, i.e. op^L X W."""
    w = e0.matrix if isinstance(e0, EmbeddingTable) else np.asarray(e0, dtype=np.float64)
    if op.kind != "sym_norm":
        raise EncoderError("the one-hot GCN check runs on the normalized adjacency without self-loops")
    if op.n > DENSE_GUARD:
        raise EncoderError(f"dense one-hot construction limited to n <= {DENSE_GUARD}")
    a = op.toarray()
    h = np.eye(op.n)
    for _ in range(num_layers):
        h = a @ h
    return h @ w


def init_embeddings(n: int, d: int, seed: int) -> EmbeddingTable:
    return EmbeddingTable.init(n, d, seed)


# --
# Relative influence


def _plain_adjacency(g) -> SparseOperator:
    if isinstance(g, SparseOperator):
        return g
    if isinstance(g, (InteractionGraph, PlainGraph)):
        return build_adjacency(g)
    raise EncoderError("expected a graph or raw adjacency operator")


def relative_influence(g, u: int, variant: str, num_layers: int) -> Fraction:
    """Exact relative self-influence of node ``u`` from walk counts.

    selfloop_last sums walks in A + I of length L; layer_average adds the
    per-layer ratios for l = 0..L.
    """
    a = _plain_adjacency(g)
    if num_layers < 1:
        raise EncoderError("need at least one layer")
    if not 0 <= u < a.n:
        raise EncoderError(f"node {u} not in graph")
    if a.n > DENSE_GUARD:
        raise GraphError(f"relative influence uses dense walk counts; n must be <= {DENSE_GUARD}")
    if variant == "selfloop_last":
        looped = SparseOperator(a.matrix + sp.identity(a.n, format="csr"), "raw")
        w = walk_counts(looped, num_layers)
        return Fraction(int(w[u, u]), int(w[:, u].sum()))
    if variant == "layer_average":
        total = Fraction(0)
        for layer in range(num_layers + 1):
            w = walk_counts(a, layer)
            col = int(w[:, u].sum())
            if col:
                total += Fraction(int(w[u, u]), col)
        return total
    raise EncoderError(f"unknown variant {variant!r}")


def influence_closed_form(g, u: int, variant: str) -> Fraction:
    """Two-layer closed forms (exact on trees)."""
    a = _plain_adjacency(g)
    d = int(round(a.matrix[u].sum()))
    d2 = two_hop_count(a, u)
    if variant == "selfloop_last":
        return Fraction(1 + d, 1 + 3 * d + d2)
    if variant == "layer_average":
        return 1 + Fraction(d, d + d2) if d + d2 else Fraction(1)
    raise EncoderError(f"unknown variant {variant!r}")
