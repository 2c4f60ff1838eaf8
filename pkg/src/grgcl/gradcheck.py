"""End-to-end finite-difference check of the E0 gradient."""

from __future__ import annotations

import numpy as np

from .encoder import EmbeddingTable, propagate, propagate_backward
from .graph import InteractionGraph, negative_sampler
from .losses import TrainingBatch
from .training import TrainConfig, compute_loss, encoder_operator


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = x.copy()
    grad = np.zeros_like(x)
    for idx in range(x.size):
        old = x.flat[idx]
        x.flat[idx] = old + step
        fp = f(x)
        x.flat[idx] = old - step
        fm = f(x)
        x.flat[idx] = old
        grad.flat[idx] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def random_bipartite(n: int, seed: int, density: float = 0.3) -> InteractionGraph:
    """Small random bipartite graph with every node connected."""
    rng = np.random.default_rng(seed)
    n_users = max(2, n * 2 // 5)
    n_items = n - n_users
    r = rng.random((n_users, n_items)) < density
    # guarantee degree >= 1 and at least one non-neighbour for every user
    r[np.arange(n_users), rng.integers(0, n_items, n_users)] = True
    r[rng.integers(0, n_users, n_items), np.arange(n_items)] = True
    full = r.all(axis=1)
    for u in np.flatnonzero(full):
        r[u, rng.integers(0, n_items)] = False
    r[rng.integers(0, n_users, n_items), np.arange(n_items)] |= ~r.any(axis=0)
    u, i = np.nonzero(r)
    return InteractionGraph(n_users, n_items, np.column_stack([u, i]))


def grad_check(
    loss: str = "gr_coles",
    n: int = 30,
    dim: int = 8,
    seed: int = 0,
    layers: int = 2,
    variant: str = "layer_average",
    normalize: str = "auto",
    k: int = 2,
    step: float = 1e-5,
) -> dict:
    """Compare analytic and central-difference gradients of loss(propagate(E0)).

    The batch and its negatives are drawn once and held fixed.
    """
    graph = random_bipartite(n, seed)
    cfg = TrainConfig(loss=loss, layers=layers, variant=variant, normalize=normalize, k=k, dim=dim, lam=1e-2)
    prop = cfg.propagation()
    op = encoder_operator(graph, cfg.variant)
    rng = np.random.default_rng(seed)
    e0 = EmbeddingTable.init(graph.n, dim, seed, std=1.0)
    batch = TrainingBatch.from_edges(
        graph.edges[:, 0], graph.edges[:, 1] + graph.n_users, negative_sampler(graph, k, rng)
    )
    lam = cfg.lam if cfg.loss == "bpr" else 0.0

    def f(x):
        e, _ = propagate(x, op, prop)
        return compute_loss(e, batch, cfg, x).value

    e, cache = propagate(e0, op, prop)
    out = compute_loss(e, batch, cfg, e0.matrix)
    analytic = propagate_backward(out.grad, cache, op, prop) + 2.0 * lam * e0.matrix
    numeric = central_difference(f, e0.matrix, step)
    return {
        "loss": cfg.loss,
        "normalized": cfg.normalized,
        "n": graph.n,
        "dim": dim,
        "seed": seed,
        "max_rel_error": relative_error(analytic, numeric),
    }
