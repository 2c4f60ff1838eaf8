"""Dataset ingestion, per-user splitting, and synthetic graph generators."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import GraphError, InteractionGraph, PlainGraph, drop_isolated_items

logger = logging.getLogger(__name__)


class DataError(ValueError):
    pass


# --
# Interaction files


def read_pairs(path) -> list[tuple[str, str]]:
    """``user<TAB>item`` lines; extra trailing fields are ignored."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 2 or not fields[0] or not fields[1]:
                raise DataError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            pairs.append((fields[0], fields[1]))
    if not pairs:
        raise DataError(f"{path}: no interactions")
    return pairs


def _index(pairs, user_ids=None, item_ids=None):
    umap = {u: i for i, u in enumerate(user_ids or [])}
    imap = {x: i for i, x in enumerate(item_ids or [])}
    for u, i in pairs:
        umap.setdefault(u, len(umap))
        imap.setdefault(i, len(imap))
    return umap, imap


def split_edges(
    n_users: int, n_items: int, edges: np.ndarray, ratio: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-user train/test split.

    Each user with at least two interactions keeps ``round(ratio * deg)``
    of them (at least one) for training. Test edges are drawn first from
    edges whose item keeps another training edge, so items only lose all
    training signal when a user has no other choice.
    """
    if not 0 < ratio <= 1:
        raise DataError("split ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    item_left = np.bincount(edges[:, 1], minlength=n_items)
    order = np.argsort(edges[:, 0], kind="stable")
    bounds = np.searchsorted(edges[order, 0], np.arange(n_users + 1))
    is_test = np.zeros(len(edges), dtype=bool)
    for u in range(n_users):
        rows = order[bounds[u] : bounds[u + 1]]
        deg = len(rows)
        if deg < 2:
            continue
        n_test = deg - max(1, int(round(ratio * deg)))
        deferred = []
        for r in rows[rng.permutation(deg)]:
            if n_test == 0:
                break
            if item_left[edges[r, 1]] > 1:
                is_test[r] = True
                item_left[edges[r, 1]] -= 1
                n_test -= 1
            else:
                deferred.append(r)
        for r in deferred[:n_test]:
            is_test[r] = True
            item_left[edges[r, 1]] -= 1
    return edges[~is_test], edges[is_test]


def load_interactions(
    path, split_ratio: float = 0.8, seed: int = 0, test_path=None, user_ids=None, item_ids=None
) -> InteractionGraph:
    """Read an interaction file into a split :class:`InteractionGraph`.

    With ``test_path`` the supplied split is used as-is (test pairs whose
    user or item never occurs in training are dropped); otherwise the
    per-user splitter runs on ``path``. ``user_ids``/``item_ids`` fix the
    leading part of the index maps; unseen ids follow in first-seen order.
    """
    pairs = read_pairs(path)
    uniq = list(dict.fromkeys(pairs))
    dups = len(pairs) - len(uniq)
    if dups:
        logger.info("%s: removed %d duplicate interactions", path, dups)
    umap, imap = _index(uniq, user_ids, item_ids)
    edges = np.array([(umap[u], imap[i]) for u, i in uniq], dtype=np.int64)
    user_ids, item_ids = list(umap), list(imap)
    if test_path is None:
        train, test = split_edges(len(umap), len(imap), edges, split_ratio, seed)
    else:
        train = edges
        seen = set(uniq)
        tpairs = [p for p in dict.fromkeys(read_pairs(test_path)) if p not in seen]
        known = [(umap[u], imap[i]) for u, i in tpairs if u in umap and i in imap]
        if len(known) < len(tpairs):
            logger.warning("dropped %d test pairs with unseen users or items", len(tpairs) - len(known))
        test = np.array(known, dtype=np.int64).reshape(-1, 2)
    # items with no interaction at all (possible with a fixed item list) are
    # dropped; items seen only in the test split stay as cold nodes
    n_items, both, item_ids, keep = drop_isolated_items(
        len(umap), len(imap), np.concatenate([train, test]), item_ids
    )
    train, test = both[: len(train)], both[len(train) :]
    cold = np.setdiff1d(np.arange(n_items), train[:, 1])
    if cold.size:
        logger.warning("%d items have no training interaction", cold.size)
    g = InteractionGraph(len(umap), n_items, train, test, user_ids, item_ids)
    g.meta = {"source": str(path), "duplicates_removed": dups, "split_ratio": split_ratio, "seed": seed}
    logger.info("loaded %s: n_u=%d n_i=%d m=%d test=%d", path, g.n_users, g.n_items, g.m, len(g.test_edges))
    return g


def write_interactions(g: InteractionGraph, path, split: str = "train") -> None:
    edges = {"train": g.edges, "test": g.test_edges}.get(split)
    if edges is None:
        edges = np.concatenate([g.edges, g.test_edges])
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in edges:
            fh.write(f"{g.user_ids[u]}\t{g.item_ids[i]}\n")


def _read_ids(path):
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n\r") for line in fh if line.strip()]


def write_split_dir(g: InteractionGraph, outdir) -> None:
    """train.tsv, test.tsv and the users.txt/items.txt index maps."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_interactions(g, outdir / "train.tsv", "train")
    write_interactions(g, outdir / "test.tsv", "test")
    for name, ids in (("users.txt", g.user_ids), ("items.txt", g.item_ids)):
        with open(outdir / name, "w", encoding="utf-8") as fh:
            fh.writelines(f"{x}\n" for x in ids)


def load_split_dir(path) -> InteractionGraph:
    path = Path(path)
    return load_interactions(
        path / "train.tsv",
        test_path=path / "test.tsv",
        user_ids=_read_ids(path / "users.txt"),
        item_ids=_read_ids(path / "items.txt"),
    )


def load_rec_data(path, split_ratio: float = 0.8, seed: int = 0) -> InteractionGraph:
    """A directory with train.tsv/test.tsv, or a single file to be split."""
    path = Path(path)
    if path.is_dir():
        return load_split_dir(path)
    return load_interactions(path, split_ratio, seed)


def write_meta(path, meta: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


# --
# Planted-block bipartite generator


def gen_planted_bipartite(
    n_users: int = 200,
    n_items: int = 300,
    blocks: int = 4,
    p_in: float = 0.2,
    p_out: float = 0.01,
    seed: int = 0,
) -> InteractionGraph:
    """Users and items split into aligned contiguous blocks.

    A user links to each item of its own block with probability ``p_in``
    and to every other item with ``p_out``. Users drawing fewer than two
    items are redrawn; items that end up with no interaction are dropped.
    All edges land in the training split.
    """
    if blocks < 1 or blocks > min(n_users, n_items):
        raise DataError("blocks must be between 1 and min(n_users, n_items)")
    if not 0 <= p_out <= p_in <= 1:
        raise DataError("need 0 <= p_out <= p_in <= 1")
    ub = np.arange(n_users) * blocks // n_users
    ib = np.arange(n_items) * blocks // n_items
    size = np.bincount(ib, minlength=blocks)
    expected = p_in * size[ub] + p_out * (n_items - size[ub])
    if expected.min() < 2:
        raise DataError(f"expected user degree {expected.min():.3g} < 2; raise p_in or p_out")
    rng = np.random.default_rng(seed)
    prob = np.where(ub[:, None] == ib[None, :], p_in, p_out)
    r = rng.random((n_users, n_items)) < prob
    for _ in range(1000):
        short = np.flatnonzero(r.sum(axis=1) < 2)
        if short.size == 0:
            break
        r[short] = rng.random((short.size, n_items)) < prob[short]
    else:
        raise DataError("could not give every user two interactions")
    users, items = np.nonzero(r)
    edges = np.column_stack([users, items]).astype(np.int64)
    n_kept, edges, _, keep = drop_isolated_items(n_users, n_items, edges)
    g = InteractionGraph(n_users, n_kept, edges)
    g.meta = {
        "kind": "planted",
        "n_users": n_users,
        "n_items": n_items,
        "blocks": blocks,
        "p_in": p_in,
        "p_out": p_out,
        "seed": seed,
        "user_block": ub.tolist(),
        "item_block": ib[keep].tolist(),
    }
    return g


def split_graph(g: InteractionGraph, ratio: float = 0.8, seed: int = 0) -> InteractionGraph:
    """Re-split all of ``g``'s interactions per user."""
    edges = np.concatenate([g.edges, g.test_edges])
    train, test = split_edges(g.n_users, g.n_items, edges, ratio, seed)
    out = InteractionGraph(g.n_users, g.n_items, train, test, g.user_ids, g.item_ids)
    out.meta = {**getattr(g, "meta", {}), "split_ratio": ratio, "split_seed": seed}
    return out


def planted_instance(seed: int = 0, split_ratio: float = 0.8, **kw) -> InteractionGraph:
    """Default desk-scale benchmark: 200 users, 300 items, 4 blocks."""
    return split_graph(gen_planted_bipartite(seed=seed, **kw), split_ratio, seed)


# --
# CSBM


@dataclass
class CsbmParams:
    n: int = 200
    d: int = 16
    p: float = 0.1
    q: float = 0.02
    mu: Optional[np.ndarray] = None
    nu: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.q <= self.p <= 1:
            raise DataError("need 0 <= q <= p <= 1")
        if self.d < 1:
            raise DataError("feature dimension must be >= 1")
        # uninformative features by default: both classes centred at 1/n
        default = np.full(self.d, 1.0 / self.n)
        self.mu = default if self.mu is None else np.asarray(self.mu, dtype=np.float64)
        self.nu = default if self.nu is None else np.asarray(self.nu, dtype=np.float64)
        if self.mu.shape != (self.d,) or self.nu.shape != (self.d,):
            raise DataError("class means must have length d")


def gen_csbm(params: CsbmParams) -> PlainGraph:
    """Rademacher labels, Gaussian class-conditional features, SBM edges."""
    rng = np.random.default_rng(params.seed)
    n = params.n
    labels = rng.choice(np.array([-1, 1]), size=n)
    means = np.where(labels[:, None] == 1, params.mu[None, :], params.nu[None, :])
    feats = means + rng.normal(0.0, 1.0 / np.sqrt(params.d), size=(n, params.d))
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], params.p, params.q)
    hit = rng.random(len(iu)) < prob
    g = PlainGraph(n, np.column_stack([iu[hit], ju[hit]]), features=feats, labels=labels)
    meta = asdict(params)
    meta["kind"] = "csbm"
    g.meta = meta
    return g


# --
# Node-classification files


def write_node_graph(g: PlainGraph, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ids = g.node_ids
    with open(outdir / "edges.tsv", "w", encoding="utf-8") as fh:
        for a, b in g.edges:
            fh.write(f"{ids[a]}\t{ids[b]}\n")
    if g.features is not None:
        with open(outdir / "features.csv", "w", encoding="utf-8") as fh:
            for i, row in enumerate(g.features):
                fh.write(ids[i] + "," + ",".join(repr(float(x)) for x in row) + "\n")
    if g.labels is not None:
        with open(outdir / "labels.tsv", "w", encoding="utf-8") as fh:
            for i, y in enumerate(g.labels):
                fh.write(f"{ids[i]}\t{int(y)}\n")


def read_edge_list(path) -> tuple[np.ndarray, list]:
    """Undirected edges between arbitrary node ids, indexed in first-seen order."""
    index: dict = {}
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 2:
                raise DataError(f"{path}:{lineno}: expected two node ids")
            a = index.setdefault(fields[0], len(index))
            b = index.setdefault(fields[1], len(index))
            pairs.append((a, b))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2), list(index)


def load_node_graph(indir) -> PlainGraph:
    indir = Path(indir)
    index: dict = {}
    feats = {}
    labels = {}
    if (indir / "features.csv").exists():
        with open(indir / "features.csv", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                fields = line.strip().split(",")
                if not fields[0]:
                    continue
                try:
                    feats[fields[0]] = [float(x) for x in fields[1:]]
                except ValueError as exc:
                    raise DataError(f"features.csv:{lineno}: {exc}") from None
                index.setdefault(fields[0], len(index))
    if (indir / "labels.tsv").exists():
        with open(indir / "labels.tsv", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                fields = line.split()
                if not fields:
                    continue
                if len(fields) < 2:
                    raise DataError(f"labels.tsv:{lineno}: expected node id and label")
                labels[fields[0]] = int(fields[1])
                index.setdefault(fields[0], len(index))
    pairs = []
    with open(indir / "edges.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 2:
                raise DataError(f"edges.tsv:{lineno}: expected two node ids")
            pairs.append((index.setdefault(fields[0], len(index)), index.setdefault(fields[1], len(index))))
    ids = list(index)
    n = len(ids)
    x = None
    if feats:
        f = len(next(iter(feats.values())))
        x = np.zeros((n, f))
        for k, v in feats.items():
            if len(v) != f:
                raise DataError(f"node {k}: expected {f} features, got {len(v)}")
            x[index[k]] = v
    y = None
    if labels:
        missing = [k for k in ids if k not in labels]
        if missing:
            raise DataError(f"labels.tsv: node {missing[0]} has no label")
        y = np.array([labels[k] for k in ids], dtype=np.int64)
    try:
        return PlainGraph(n, np.array(pairs, dtype=np.int64).reshape(-1, 2), x, y, ids)
    except GraphError as exc:
        raise DataError(str(exc)) from None
