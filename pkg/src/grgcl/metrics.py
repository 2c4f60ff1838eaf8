"""Top-k ranking metrics and classification accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class RankingResult:
    k: int
    recall: float
    ndcg: float
    users: int
    per_user_recall: np.ndarray = field(repr=False, default=None)
    per_user_ndcg: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"recall": self.recall, "ndcg": self.ndcg, "k": self.k, "users": self.users}


def rank_items(scores: np.ndarray, exclude=()) -> np.ndarray:
    """Item indices by descending score, ties to the lower index, excluded items removed."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    keep[np.asarray(exclude, dtype=np.int64)] = False
    items = np.flatnonzero(keep)
    # lexsort: last key is primary
    order = np.lexsort((items, -scores[items]))
    return items[order]


def recall_at_k(ranked, test_items, k: int) -> float:
    if k < 1:
        raise MetricError("k must be >= 1")
    test = set(np.asarray(test_items).tolist())
    if not test:
        raise MetricError("empty test set")
    hits = sum(1 for x in np.asarray(ranked)[:k].tolist() if x in test)
    return hits / len(test)


def ndcg_at_k(ranked, test_items, k: int) -> float:
    if k < 1:
        raise MetricError("k must be >= 1")
    test = set(np.asarray(test_items).tolist())
    if not test:
        raise MetricError("empty test set")
    dcg = sum(1.0 / np.log2(r + 2) for r, x in enumerate(np.asarray(ranked)[:k].tolist()) if x in test)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(k, len(test))))
    return float(dcg / idcg)


def accuracy(pred, true, mask=None) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if mask is None:
        mask = np.ones(len(true), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("empty evaluation mask")
    return float((pred[mask] == true[mask]).mean())


def evaluate_ranking(
    user_emb: np.ndarray,
    item_emb: np.ndarray,
    train_items: list,
    test_items: list,
    k: int = 20,
    chunk: int = 1024,
) -> RankingResult:
    """Full-catalog Recall@k / NDCG@k averaged over users with test items."""
    n_users = user_emb.shape[0]
    recalls, ndcgs = [], []
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    for start in range(0, n_users, chunk):
        block = user_emb[start : start + chunk] @ item_emb.T
        for off, scores in enumerate(block):
            u = start + off
            test = test_items[u]
            if len(test) == 0:
                continue
            s = scores.copy()
            s[train_items[u]] = -np.inf
            # stable sort on -score keeps ascending index among ties
            top = np.argsort(-s, kind="stable")[:k]
            hit = np.isin(top, test)
            recalls.append(hit.sum() / len(test))
            ndcgs.append((hit * discount[: len(top)]).sum() / discount[: min(k, len(test))].sum())
    recalls = np.asarray(recalls)
    ndcgs = np.asarray(ndcgs)
    return RankingResult(
        k=k,
        recall=float(recalls.mean()) if len(recalls) else 0.0,
        ndcg=float(ndcgs.mean()) if len(ndcgs) else 0.0,
        users=len(recalls),
        per_user_recall=recalls,
        per_user_ndcg=ndcgs,
    )
