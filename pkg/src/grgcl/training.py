"""Mini-batch GR training and GCL pre-training with a hand-rolled Adam."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .encoder import EmbeddingTable, PropagationConfig, propagate, propagate_backward
from .graph import (
    InteractionGraph,
    PlainGraph,
    SparseOperator,
    build_adjacency,
    laplacian,
    negative_pairs,
    negative_sampler,
    normalize_sym,
    pair_laplacian,
)
from .losses import LossOutput, TrainingBatch, bpr_loss, coles_loss, gr_coles_loss
from .metrics import evaluate_ranking

logger = logging.getLogger(__name__)

LOSSES = ("bpr", "coles", "gr_coles")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: str = "bpr"
    epochs: int = 50
    batch_size: int = 2048
    k: int = 1
    lr: float = 1e-2
    beta: float = 0.9
    t: float = 2.0
    lam: float = 1e-4
    layers: int = 3
    dim: int = 64
    seed: int = 0
    variant: str = "layer_average"
    normalize: str = "auto"
    eval_every: int = 1
    patience: int = 10
    topk: int = 20
    coles_weight: float = 1.0
    reg_weight: float = 1.0
    neg_resample: str = "epoch"
    neg_sharing: str = "edge"
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.loss = self.loss.replace("-", "_")
        self.variant = self.variant.replace("-", "_")
        if self.loss not in LOSSES:
            raise TrainingError(f"unknown loss {self.loss!r}")
        if self.normalize not in ("auto", "on", "off"):
            raise TrainingError("normalize must be auto, on or off")
        if self.neg_sharing not in ("edge", "user"):
            raise TrainingError("neg_sharing must be edge or user")
        if self.neg_resample not in ("once", "epoch", "batch"):
            raise TrainingError("neg_resample must be once, epoch or batch")
        for name in ("batch_size", "k", "dim", "eval_every", "patience", "topk"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be positive")
        if self.epochs < 0 or self.layers < 0 or self.lr <= 0 or self.t <= 0 or self.lam < 0:
            raise TrainingError("epochs, layers, lambda must be >= 0 and lr, t > 0")

    @classmethod
    def gcl(cls, **kw) -> "TrainConfig":
        """Node-classification defaults: 2 layers, 512 dims, self-loop GCN."""
        base = dict(layers=2, dim=512, variant="selfloop_last", epochs=100)
        base.update(kw)
        return cls(**base)

    @property
    def normalized(self) -> bool:
        if self.normalize == "auto":
            return self.loss != "bpr"
        return self.normalize == "on"

    def propagation(self) -> PropagationConfig:
        return PropagationConfig(num_layers=self.layers, variant=self.variant, normalize_output=self.normalized)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-2
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, e0: EmbeddingTable, lr: float = 1e-2, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros_like(e0.matrix), np.zeros_like(e0.matrix), lr, b1, b2, eps)


def adam_step(
    e0: EmbeddingTable, grad: np.ndarray, state: OptimizerState, lam: float = 0.0, tag: str = ""
) -> None:
    """Bias-corrected Adam on rows with a nonzero loss gradient, in place.

    ``lam`` adds the gradient of lam * |E0|^2 on those rows.
    """
    if grad.shape != e0.matrix.shape or state.m.shape != grad.shape:
        raise TrainingError("gradient / moment shape mismatch")
    if not np.isfinite(grad).all():
        raise TrainingError(f"non-finite gradient{' in ' + tag if tag else ''}")
    rows = np.flatnonzero(np.any(grad != 0, axis=1))
    state.step += 1
    if rows.size == 0:
        return
    g = grad[rows]
    if lam:
        g = g + 2.0 * lam * e0.matrix[rows]
    state.m[rows] = state.b1 * state.m[rows] + (1 - state.b1) * g
    state.v[rows] = state.b2 * state.v[rows] + (1 - state.b2) * g * g
    m_hat = state.m[rows] / (1 - state.b1**state.step)
    v_hat = state.v[rows] / (1 - state.b2**state.step)
    e0.matrix[rows] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def encoder_operator(g: InteractionGraph | PlainGraph, variant: str) -> SparseOperator:
    # nodes without training edges (cold test items) keep a zero row: they
    # contribute only their layer-0 embedding
    return normalize_sym(build_adjacency(g), self_loop=variant == "selfloop_last", allow_isolated=True)


@dataclass
class RecModel:
    e0: EmbeddingTable
    prop: PropagationConfig
    n_users: int
    n_items: int
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)

    def embeddings(self, graph: InteractionGraph, op: Optional[SparseOperator] = None) -> np.ndarray:
        op = op or encoder_operator(graph, self.prop.variant)
        return propagate(self.e0, op, self.prop)[0]

    def evaluate(self, graph: InteractionGraph, k: int = 20):
        e = self.embeddings(graph)
        return evaluate_ranking(
            e[: self.n_users], e[self.n_users :], graph.user_items("train"), graph.user_items("test"), k
        )


def compute_loss(
    e: np.ndarray, batch: TrainingBatch, cfg: TrainConfig, e0: Optional[np.ndarray] = None
) -> LossOutput:
    if cfg.loss == "bpr":
        sq = float(np.sum(e0 * e0)) if e0 is not None else 0.0
        return bpr_loss(e, batch, cfg.lam, sq)
    reg = 0.0 if cfg.loss == "coles" else cfg.reg_weight
    return gr_coles_loss(e, batch, beta=cfg.beta, t=cfg.t, coles_weight=cfg.coles_weight, reg_weight=reg)


def _rngs(seed: int):
    init, sample = np.random.SeedSequence(seed).spawn(2)
    return int(init.generate_state(1)[0]), np.random.default_rng(sample)


def train_gr(
    graph: InteractionGraph,
    cfg: TrainConfig,
    on_eval: Optional[Callable[[dict], None]] = None,
) -> tuple[RecModel, list]:
    """Train a LightGCN-style recommender with the configured loss.

    Each epoch shuffles the training edges into batches, draws K negatives
    per distinct batch user, and takes one Adam step per batch. Test
    Recall/NDCG are recorded every ``eval_every`` epochs; training stops
    after ``patience`` evaluations without a Recall improvement and the
    best embeddings are kept.
    """
    if graph.m == 0:
        raise TrainingError("graph has no training edges")
    init_seed, rng = _rngs(cfg.seed)
    prop = cfg.propagation()
    op = encoder_operator(graph, cfg.variant)
    e0 = EmbeddingTable.init(graph.n, cfg.dim, init_seed)
    state = OptimizerState.like(e0, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    sampler = negative_sampler(graph, cfg.k, rng)
    model = RecModel(e0, prop, graph.n_users, graph.n_items, list(graph.user_ids), list(graph.item_ids))
    lam = cfg.lam if cfg.loss == "bpr" else 0.0
    has_test = len(graph.test_edges) > 0
    if not has_test:
        logger.warning("empty test split; ranking metrics omitted")
    train_items = graph.user_items("train")
    test_items = graph.user_items("test")

    history: list = []
    best, best_e0, stale = -np.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(graph.m)
        totals: dict = {}
        n_batches = 0
        for start in range(0, graph.m, cfg.batch_size):
            rows = graph.edges[perm[start : start + cfg.batch_size]]
            make = TrainingBatch.from_rows if cfg.neg_sharing == "edge" else TrainingBatch.from_edges
            batch = make(rows[:, 0], rows[:, 1] + graph.n_users, sampler)
            e, cache = propagate(e0, op, prop)
            out = compute_loss(e, batch, cfg, e0.matrix)
            if not np.isfinite(out.value):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {n_batches}")
            grad = propagate_backward(out.grad, cache, op, prop)
            adam_step(e0, grad, state, lam, tag=f"epoch {epoch} batch {n_batches}")
            totals["loss"] = totals.get("loss", 0.0) + out.value
            for key, val in out.parts.items():
                totals[key] = totals.get(key, 0.0) + val
            n_batches += 1
        record = {"epoch": epoch, **{k: v / n_batches for k, v in totals.items()}}
        if has_test and epoch % cfg.eval_every == 0:
            e = propagate(e0, op, prop)[0]
            res = evaluate_ranking(e[: graph.n_users], e[graph.n_users :], train_items, test_items, cfg.topk)
            record[f"recall@{cfg.topk}"] = res.recall
            record[f"ndcg@{cfg.topk}"] = res.ndcg
            if on_eval:
                on_eval(record)
            if res.recall > best:
                best, best_e0, stale = res.recall, e0.matrix.copy(), 0
            else:
                stale += 1
        history.append(record)
        if stale >= cfg.patience:
            logger.info("early stop at epoch %d (best recall@%d %.4f)", epoch, cfg.topk, best)
            break
    if best_e0 is not None:
        e0.matrix[:] = best_e0
    return model, history


# --
# Node classification path


@dataclass
class GclModel:
    e0: EmbeddingTable
    prop: PropagationConfig
    embeddings: np.ndarray


def train_gcl(graph: PlainGraph, cfg: TrainConfig) -> tuple[GclModel, list]:
    """Full-graph pre-training with COLES or BPR-as-GCL; returns frozen E.

    COLES uses the graph Laplacian and a sampled negative Laplacian with K
    non-neighbours per node. BPR-as-GCL treats every edge, in both
    directions, as a positive pair and shares K sampled negatives per
    anchor node.
    """
    if cfg.loss == "gr_coles":
        raise TrainingError("gr_coles is a recommendation objective; use bpr or coles")
    init_seed, rng = _rngs(cfg.seed)
    prop = cfg.propagation()
    op = encoder_operator(graph, cfg.variant)
    e0 = EmbeddingTable.init(graph.n, cfg.dim, init_seed)
    state = OptimizerState.like(e0, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    directed = graph.directed_edges()
    sampler = negative_sampler(graph, cfg.k, rng)
    l_pos = laplacian(build_adjacency(graph))
    l_neg = None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        e, cache = propagate(e0, op, prop)
        if cfg.loss == "coles":
            if l_neg is None or cfg.neg_resample != "once":
                l_neg = pair_laplacian(negative_pairs(graph, cfg.k, rng), graph.n, "neg_laplacian")
            out = coles_loss(e, l_pos, l_neg, cfg.beta)
        else:
            batch = TrainingBatch.from_edges(directed[:, 0], directed[:, 1], sampler)
            out = bpr_loss(e, batch, cfg.lam, float(np.sum(e0.matrix**2)))
        if not np.isfinite(out.value):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        grad = propagate_backward(out.grad, cache, op, prop)
        adam_step(e0, grad, state, cfg.lam if cfg.loss == "bpr" else 0.0, tag=f"epoch {epoch}")
        history.append({"epoch": epoch, "loss": out.value, **out.parts})
    e = propagate(e0, op, prop)[0]
    return GclModel(e0, prop, e.copy()), history


@dataclass
class LinearClassifier:
    weights: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    mean: np.ndarray
    scale: np.ndarray


def fit_linear_classifier(
    e: np.ndarray,
    labels: np.ndarray,
    train_mask: np.ndarray,
    iters: int = 500,
    lr: float = 0.5,
    l2: float = 1e-4,
) -> LinearClassifier:
    """Multinomial logistic regression by full-batch gradient descent."""
    train_mask = np.asarray(train_mask, dtype=bool)
    x = np.asarray(e, dtype=np.float64)[train_mask]
    y = np.asarray(labels)[train_mask]
    classes, yi = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise TrainingError("training labels contain a single class")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    x = (x - mean) / scale
    n, f = x.shape
    c = len(classes)
    onehot = np.eye(c)[yi]
    w = np.zeros((f, c))
    b = np.zeros(c)
    for _ in range(iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        diff = (p - onehot) / n
        w -= lr * (x.T @ diff + l2 * w)
        b -= lr * diff.sum(axis=0)
    return LinearClassifier(w, b, classes, mean, scale)


def predict(clf: LinearClassifier, e: np.ndarray, mask=None) -> np.ndarray:
    x = np.asarray(e, dtype=np.float64)
    if mask is not None:
        x = x[np.asarray(mask, dtype=bool)]
    logits = ((x - clf.mean) / clf.scale) @ clf.weights + clf.bias
    return clf.classes[np.argmax(logits, axis=1)]


def random_split_mask(n: int, train_frac: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: int(round(train_frac * n))]] = True
    return mask


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(copy.deepcopy(cfg))
