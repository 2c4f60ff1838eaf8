"""Command-line entry point: ``grgcl <subcommand> [flags]``.

Machine-readable results go to stdout (JSON lines) and to files; logging
and human summaries go to stderr. Exit status is 0 on success, 1 on a
usage error and 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bounds import audit_many, beta_ratio_distribution, summarize
from .data import (
    CsbmParams,
    gen_csbm,
    gen_planted_bipartite,
    load_node_graph,
    load_rec_data,
    read_edge_list,
    split_graph,
    write_meta,
    write_node_graph,
    write_split_dir,
)
from .encoder import influence_closed_form, relative_influence, row_normalize
from .gradcheck import grad_check
from .graph import PlainGraph
from .metrics import accuracy
from .modelio import load_model, save_model
from .training import (
    TrainConfig,
    config_dict,
    fit_linear_classifier,
    predict,
    random_split_mask,
    train_gcl,
    train_gr,
)

logger = logging.getLogger("grgcl")

THREADS_ENV = "GRGCL_THREADS"
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --
# run bookkeeping


def fingerprint(path) -> str:
    """sha256 over a file, or over a directory's files in name order."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode("utf-8") + b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


class RunMetadata:
    """Resolved config, seeds, input fingerprints, version and phase timings."""

    def __init__(self, command: str, config: dict, inputs: dict, seeds: dict):
        self.record = {
            "command": command,
            "version": __version__,
            "config": config,
            "seeds": seeds,
            "inputs": {k: {"path": str(v), "sha256": fingerprint(v)} for k, v in inputs.items() if v},
            "timings": {},
        }
        self.path = None

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.record["timings"][name] = round(time.perf_counter() - t0, 6)

    def write(self, path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_meta(self.path, self.record)

    def finish(self) -> None:
        if self.path is not None:
            write_meta(self.path, self.record)


class Emitter:
    """Writes JSON lines to stdout and, optionally, appends them to a file."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True, default=_plain)
        print(line, flush=True)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"{args.command}: --seed is required")
    return args.seed


# --
# subcommands


def cmd_train(args) -> int:
    seed = _require_seed(args)
    if args.data is None:
        raise UsageError("train: --data is required")
    overrides = {
        k: v
        for k, v in dict(
            loss=args.loss,
            epochs=args.epochs,
            batch_size=args.batch,
            k=args.neg_k,
            lr=args.lr,
            beta=args.beta,
            t=args.t,
            lam=args.lam,
            layers=args.layers,
            dim=args.dim,
            seed=seed,
            variant=args.variant,
            normalize=args.normalize,
            eval_every=args.eval_every,
            patience=args.patience,
            topk=args.topk,
            reg_weight=args.reg_weight,
            coles_weight=args.coles_weight,
        ).items()
        if v is not None
    }
    cfg = TrainConfig.gcl(**overrides) if args.task == "node-cls" else TrainConfig(**overrides)
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.parent / "metrics.jsonl"
    emit = Emitter(metrics_path)
    conf = {**config_dict(cfg), "task": args.task, "split_ratio": args.split_ratio, "data": args.data}
    meta = RunMetadata("train", conf, {"data": args.data}, {"seed": seed})
    meta.write(str(out) + ".meta.json")
    emit({"type": "run_metadata", **meta.record})

    if args.task == "rec":
        with meta.phase("load"):
            graph = load_rec_data(args.data, args.split_ratio, seed)
        logger.info("loaded %d users, %d items, %d train edges", graph.n_users, graph.n_items, graph.m)
        with meta.phase("train"):
            model, history = train_gr(graph, cfg, on_eval=lambda r: emit({"type": "eval", **r}))
        with meta.phase("save"):
            save_model(model, out)
        with meta.phase("eval"):
            res = model.evaluate(graph, cfg.topk)
        emit({"type": "final", "epochs_run": len(history), **res.to_dict()})
    else:
        with meta.phase("load"):
            graph = load_node_graph(args.data)
        if graph.labels is None:
            raise RuntimeError(f"{args.data}: node classification needs labels.tsv")
        with meta.phase("train"):
            model, history = train_gcl(graph, cfg)
        for rec in history[:: max(1, cfg.eval_every)]:
            emit({"type": "epoch", **rec})
        with meta.phase("save"):
            out.parent.mkdir(parents=True, exist_ok=True)
            with open(out, "wb") as fh:
                np.save(fh, model.embeddings)
        with meta.phase("classify"):
            mask = random_split_mask(graph.n, args.train_frac, seed)
            clf = fit_linear_classifier(model.embeddings, graph.labels, mask)
            acc = accuracy(predict(clf, model.embeddings), graph.labels, ~mask)
            test = graph.labels[~mask]
            majority = max(np.mean(test == c) for c in np.unique(graph.labels))
        emit({"type": "final", "accuracy": acc, "majority_baseline": float(majority), "test_nodes": int(len(test))})
    meta.finish()
    return 0


def cmd_eval(args) -> int:
    data = Path(args.data)
    if not data.is_dir():
        _require_seed(args)
    meta = RunMetadata("eval", {"k": args.k, "split_ratio": args.split_ratio}, {"model": args.model, "data": args.data}, {"seed": args.seed})
    if args.meta:
        meta.write(args.meta)
    with meta.phase("load"):
        model = load_model(args.model)
        graph = load_rec_data(data, args.split_ratio, args.seed or 0)
    if list(graph.user_ids) != list(model.user_ids) or list(graph.item_ids) != list(model.item_ids):
        raise RuntimeError("model and data disagree on user/item ids; load the data the model was trained on")
    with meta.phase("eval"):
        res = model.evaluate(graph, args.k)
    Emitter(args.metrics)({"recall": res.recall, "ndcg": res.ndcg, "k": res.k, "users": res.users})
    meta.finish()
    return 0


def cmd_audit(args) -> int:
    seed = _require_seed(args)
    outdir = Path(args.out_dir)
    conf = {k: getattr(args, k) for k in ("batches", "anchors", "neg_k", "batch_size", "bins", "split_ratio")}
    meta = RunMetadata("audit-bounds", conf, {"data": args.data, "model": args.model}, {"seed": seed})
    meta.write(outdir / "run_meta.json")
    emit = Emitter(outdir / "metrics.jsonl")
    emit({"type": "run_metadata", **meta.record})
    with meta.phase("load"):
        graph = load_rec_data(args.data, args.split_ratio, seed)
        if args.model:
            model = load_model(args.model)
            e = model.embeddings(graph)
        else:
            e = np.random.default_rng(seed).normal(size=(graph.n, args.dim))
        e = row_normalize(e)[0]
    with meta.phase("audit"):
        reports = audit_many(e, graph, args.batches, args.anchors, args.neg_k, seed)
    for b, r in enumerate(reports):
        emit({"type": "batch", "batch": b, **r.to_dict()})
    with meta.phase("ratios"):
        dist = beta_ratio_distribution(None, graph, args.batches, args.batch_size, seed, args.bins)
    with open(outdir / "ratios.csv", "w", encoding="utf-8") as fh:
        fh.write("batch_index,ratio\n")
        for b, r in enumerate(dist["ratios"]):
            fh.write(f"{b},{float(r)!r}\n")
    edges = dist["bin_edges"]
    with open(outdir / "histogram.csv", "w", encoding="utf-8") as fh:
        fh.write("bin_left,bin_right,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], dist["counts"]):
            fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)}\n")
    summary = summarize(reports)
    summary["ratio_median"] = float(np.median(dist["ratios"]))
    emit({"type": "summary", **summary})
    meta.finish()
    bad = summary["batches"] - summary["sandwich_ok"]
    if bad:
        logger.warning("%d of %d batches violate the sandwich", bad, summary["batches"])
    return 0


def cmd_grad_check(args) -> int:
    seed = _require_seed(args)
    res = grad_check(
        loss=args.loss.replace("-", "_"),
        n=args.n,
        dim=args.dim,
        seed=seed,
        layers=args.layers,
        variant=args.variant.replace("-", "_"),
        normalize=args.normalize,
        k=args.neg_k,
    )
    res["tolerance"] = GRAD_TOL
    res["ok"] = res["max_rel_error"] <= GRAD_TOL
    Emitter(args.metrics)(res)
    print(f"max relative gradient error {res['max_rel_error']:.3e}", file=sys.stderr)
    return 0 if res["ok"] else 2


def cmd_influence(args) -> int:
    pairs, ids = read_edge_list(args.graph)
    g = PlainGraph(len(ids), pairs, node_ids=ids)
    node = args.node
    if node in ids:
        u = ids.index(node)
    else:
        raise RuntimeError(f"node {node!r} not in {args.graph}")
    variants = ("layer_average", "selfloop_last") if args.variant == "both" else (args.variant.replace("-", "_"),)
    emit = Emitter(args.metrics)
    for v in variants:
        exact = relative_influence(g, u, v, args.layers)
        closed = influence_closed_form(g, u, v)
        emit(
            {
                "variant": v,
                "node": node,
                "layers": args.layers,
                "exact": str(exact),
                "exact_value": float(exact),
                "closed_form": str(closed),
                "closed_form_value": float(closed),
                "closed_form_layers": 2,
                "match": exact == closed,
            }
        )
    return 0


def cmd_gen_synth(args) -> int:
    seed = _require_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "csbm":
        params = CsbmParams(n=args.n, d=args.d, p=args.p, q=args.q, seed=seed)
        g = gen_csbm(params)
        write_node_graph(g, out)
        meta = dict(g.meta)
        summary = {"nodes": g.n, "edges": g.m}
    else:
        g = gen_planted_bipartite(args.n_users, args.n_items, args.blocks, args.p_in, args.p_out, seed)
        g = split_graph(g, args.split_ratio, seed)
        write_split_dir(g, out)
        meta = dict(g.meta)
        summary = {"users": g.n_users, "items": g.n_items, "train_edges": g.m, "test_edges": len(g.test_edges)}
    meta["version"] = __version__
    write_meta(out / "meta.json", meta)
    Emitter()({"kind": args.kind, "out": str(out), "seed": seed, **summary})
    return 0


# --
# parser


def _common(p, seed=True):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--threads", type=int, help=f"cap BLAS/OpenMP workers (default ${THREADS_ENV})")
    p.add_argument("--log-level", default="INFO")
    if seed:
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grgcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train a recommender or a GCL encoder")
    _common(p)
    p.add_argument("--task", choices=["rec", "node-cls"], default="rec")
    p.add_argument("--loss", choices=["bpr", "coles", "gr-coles", "gr_coles"])
    p.add_argument("--data", help="interaction file/dir (rec) or node graph dir (node-cls)")
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--neg-k", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--variant", choices=["layer-average", "selfloop-last", "layer_average", "selfloop_last"])
    p.add_argument("--normalize", choices=["on", "off", "auto"])
    p.add_argument("--eval-every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--reg-weight", type=float)
    p.add_argument("--coles-weight", type=float)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--train-frac", type=float, default=0.5, help="labelled fraction for node-cls")
    p.add_argument("--out", default="model.bin")
    p.add_argument("--metrics", help="JSON-lines file (default: metrics.jsonl next to --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall/NDCG of a saved model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--metrics")
    p.add_argument("--meta", help="write run metadata here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit-bounds", help="audit the BPR/COLES sandwich and beta ratios")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="trained model; random unit embeddings if omitted")
    p.add_argument("--dim", type=int, default=16, help="random embedding width without --model")
    p.add_argument("--batches", type=int, default=1000)
    p.add_argument("--anchors", type=int, default=16, help="users per audit batch")
    p.add_argument("--neg-k", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=2048, help="edges per ratio batch")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--out-dir", default="audit")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--loss", choices=["bpr", "coles", "gr-coles", "gr_coles"], default="gr-coles")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--variant", choices=["layer-average", "selfloop-last", "layer_average", "selfloop_last"], default="layer-average")
    p.add_argument("--normalize", choices=["on", "off", "auto"], default="auto")
    p.add_argument("--neg-k", type=int, default=2)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("influence", help="relative self-influence, exact and closed form")
    _common(p, seed=False)
    p.add_argument("--graph", required=True, help="whitespace-separated edge list")
    p.add_argument("--node", required=True, help="node id as written in the edge list")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--variant", choices=["both", "layer-average", "selfloop-last"], default="both")
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("gen-synth", help="generate a CSBM or planted-block dataset")
    _common(p)
    p.add_argument("--kind", choices=["csbm", "planted"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200, help="csbm nodes")
    p.add_argument("--d", type=int, default=16, help="csbm feature dimension")
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--q", type=float, default=0.02)
    p.add_argument("--n-users", type=int, default=200)
    p.add_argument("--n-items", type=int, default=300)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--p-in", type=float, default=0.2)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.set_defaults(func=cmd_gen_synth)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"lambda"})
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {', '.join(unknown)}")
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        # file values become defaults (string defaults get the flag's type
        # conversion), then the command line is parsed again on top
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def dispatch(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except OSError as exc:
        print(f"grgcl: cannot read config: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    threads = args.threads if args.threads is not None else os.environ.get(THREADS_ENV)
    try:
        threads = int(threads) if threads is not None else None
        if threads is not None and threads < 1:
            raise ValueError
    except ValueError:
        print(f"grgcl: thread count must be a positive integer, got {threads!r}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"grgcl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
