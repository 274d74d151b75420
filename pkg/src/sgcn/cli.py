"""Command-line entry points: ``sgcn <subcommand> [options]``.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .ann import KnnIndex
from .bench import PERTURB_KINDS, BenchConfig, PerturbSpec, perturb_name, render_table, report_to_json, run_comparison
from .features import FeatureFileError, NgramEncoderConfig, encode_graph, encode_names, load_feature_file, save_feature_file
from .gcn import embed_rows, gcn_forward, load_model, save_model
from .graph import (GraphError, SynthConfig, augment_canonical, generate_synthetic_kg, load_graph, load_mentions,
                    normalized_adjacency, save_graph, save_mentions, split_train_test)
from .matcher import RULES, BundleError, batch_match, build_bundle, load_bundle, save_bundle
from .siamese import SiameseGCN

log = logging.getLogger("sgcn")

EXIT_USAGE = 1
EXIT_DATA = 2
DATA_ERRORS = (GraphError, FeatureFileError, BundleError, ValueError, OSError, KeyError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _graph_paths(d) -> tuple[Path, Path]:
    d = Path(d)
    return d / "nodes.jsonl", d / "edges.jsonl"


def _load_graph_dir(d):
    return load_graph(*_graph_paths(d))


def _encoder_from(args) -> NgramEncoderConfig:
    return NgramEncoderConfig(n=args.ngram, n_features=args.n_features)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = SynthConfig(entity_count=args.entities, branches_min=args.branches_min, branches_max=args.branches_max,
                      mention_count=args.mentions, mention_typo_rate=args.typo_rate,
                      mention_max_edits=args.max_edits, mention_drop_suffix_rate=args.drop_suffix_rate,
                      subsidiary_rate=args.subsidiary_rate, seed=args.seed)
    g, mentions = generate_synthetic_kg(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, *_graph_paths(out))
    save_mentions(mentions, out / "mentions.jsonl")
    if args.test_fraction is not None:
        train, test = split_train_test(mentions, args.test_fraction, args.seed)
        save_mentions(train, out / "mentions_train.jsonl")
        save_mentions(test, out / "mentions_test.jsonl")
    print(f"{g.n_nodes} nodes, {len(g.edges)} edges, {g.entity_count} entities, {len(mentions)} mentions -> {out}")
    return 0


def cmd_augment(args) -> int:
    g = augment_canonical(_load_graph_dir(args.graph))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, *_graph_paths(out))
    print(f"{g.n_nodes} nodes after augmentation -> {out}")
    return 0


def cmd_featurize(args) -> int:
    enc = _encoder_from(args)
    if args.mentions:
        X = encode_names([m.name for m in load_mentions(args.mentions)], enc)
    else:
        X = encode_graph(_load_graph_dir(args.graph), enc)
    save_feature_file(X, args.out)
    print(f"{X.shape[0]} x {X.shape[1]} features -> {args.out}")
    return 0


def cmd_train(args) -> int:
    g = _load_graph_dir(args.graph)
    enc = _encoder_from(args)
    if args.features:
        X = load_feature_file(args.features).astype(np.float64)
        if X.shape != (g.n_nodes, enc.n_features):
            raise ValueError(f"feature file shape {X.shape} does not match graph ({g.n_nodes} nodes, F={enc.n_features})")
    else:
        X = encode_graph(g, enc)
    model = SiameseGCN(embedding_dim=args.embedding_dim, hidden_dims=tuple(args.hidden), margin=args.margin,
                       learning_rate=args.lr, momentum=args.momentum, epochs=args.epochs,
                       batch_size=args.batch_size, pairs_per_node=args.pairs_per_node,
                       n_subspaces=args.subspaces, refresh_every=args.refresh_every, seed=args.seed)
    model.fit(X, g.labels, adjacency=normalized_adjacency(g))
    meta = {"encoder": enc.to_dict(), "train": model.train_config().to_dict()}
    save_model(args.out, model.params_, meta)
    if args.metrics:
        with open(args.metrics, "w") as fh:
            for rec in model.history_:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    last = model.history_[-1]["mean_loss"] if model.history_ else float("nan")
    print(f"trained {model.params_.layer_dims} for {args.epochs} epochs, final mean loss {last:.6f} -> {args.out}")
    return 0


def _model_encoder(header: dict) -> NgramEncoderConfig:
    if "encoder" not in header:
        raise ValueError("model file carries no encoder config")
    return NgramEncoderConfig(**header["encoder"])


def cmd_embed(args) -> int:
    params, header = load_model(args.model)
    enc = _model_encoder(header)
    if args.mentions:
        Z = embed_rows(encode_names([m.name for m in load_mentions(args.mentions)], enc), params)
    else:
        g = _load_graph_dir(args.graph)
        Z, _ = gcn_forward(normalized_adjacency(g), encode_graph(g, enc), params)
    save_feature_file(Z, args.out)
    print(f"{Z.shape[0]} x {Z.shape[1]} embeddings -> {args.out}")
    return 0


def cmd_index(args) -> int:
    g = _load_graph_dir(args.graph)
    params, header = load_model(args.model)
    idx = KnnIndex(mode=args.mode, max_neighbors=args.max_neighbors, ef_construction=args.ef_construction,
                   ef_search=args.ef_search, seed=args.seed)
    bundle = build_bundle(g, params, _model_encoder(header), idx, header)
    manifest = save_bundle(bundle, args.out)
    print(f"indexed {idx.size} nodes ({args.mode}) -> {args.out}")
    log.info("manifest %s", manifest)
    return 0


def cmd_match(args) -> int:
    if not args.query and not args.mentions:
        raise UsageError("give --query or --mentions")
    bundle = load_bundle(args.bundle)
    names = list(args.query or [])
    truth = None
    if args.mentions:
        ms = load_mentions(args.mentions)
        names += [m.name for m in ms]
        truth = [m.entity for m in ms]
    results = batch_match(bundle, names, args.k, args.rule)
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in results]
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
    else:
        print("\n".join(lines))
    if truth is not None:
        pred = [r.entity for r in results[len(results) - len(truth):]]
        acc = float(np.mean(np.array(pred) == np.array(truth)))
        print(f"accuracy {acc:.4f} on {len(truth)} mentions", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = BenchConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seeds = [args.seed + i for i in range(len(cfg.seeds))]
    report = run_comparison(cfg)
    Path(args.out).write_text(report_to_json(report))
    print(render_table(report), end="")
    if report["failures"]:
        print(f"failed sub-runs: {', '.join(report['failures'])}", file=sys.stderr)
        return EXIT_DATA
    return 0


def cmd_perturb(args) -> int:
    names = list(args.name or [])
    if args.input:
        names += [line for line in Path(args.input).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not names:
        raise UsageError("give names as arguments or via --input")
    for i, name in enumerate(names):
        print(perturb_name(name, PerturbSpec(args.kind, args.count, args.seed + i)))
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.bundle, args.bind)
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--log-level", default="WARNING")
    # eval keeps its config's seeds unless --seed is given
    eval_common = _Parser(add_help=False)
    eval_common.add_argument("--seed", type=int, default=None, help="first seed; replaces the config's seed list")
    eval_common.add_argument("--log-level", default="WARNING")
    enc = _Parser(add_help=False)
    enc.add_argument("--ngram", type=int, default=3, help="character n-gram length")
    enc.add_argument("--n-features", type=int, default=256, help="hashed feature width (power of two)")

    p = _Parser(prog="sgcn", description="Siamese GCN entity matching toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic knowledge graph")
    s.add_argument("--entities", type=int, default=200)
    s.add_argument("--branches-min", type=int, default=3)
    s.add_argument("--branches-max", type=int, default=12)
    s.add_argument("--mentions", type=int, default=400)
    s.add_argument("--typo-rate", type=float, default=0.3)
    s.add_argument("--max-edits", type=int, default=1)
    s.add_argument("--drop-suffix-rate", type=float, default=0.0)
    s.add_argument("--subsidiary-rate", type=float, default=0.5)
    s.add_argument("--test-fraction", type=float, default=None,
                   help="also write mentions_train/test.jsonl with this test share")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("augment", parents=[common], help="add canonical-name nodes")
    s.add_argument("--graph", required=True, help="directory holding nodes.jsonl and edges.jsonl")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("featurize", parents=[common, enc], help="write hashed n-gram features (FMX1)")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--graph")
    src.add_argument("--mentions")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", parents=[common, enc], help="train the siamese GCN")
    s.add_argument("--graph", required=True)
    s.add_argument("--features", help="precomputed FMX1 node features (default: encode names)")
    s.add_argument("--embedding-dim", type=int, default=64)
    s.add_argument("--hidden", type=int, nargs="*", default=[128], help="hidden widths; empty for one layer")
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.0)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--pairs-per-node", type=int, default=4)
    s.add_argument("--subspaces", type=int, default=8)
    s.add_argument("--refresh-every", type=int, default=5)
    s.add_argument("--out", required=True, help="model file")
    s.add_argument("--metrics", help="per-epoch metrics (JSON lines)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", parents=[common], help="write embeddings (FMX1)")
    s.add_argument("--model", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--graph")
    src.add_argument("--mentions", help="embed mentions as isolated nodes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("index", parents=[common], help="build a matcher bundle directory")
    s.add_argument("--graph", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--mode", choices=("exact", "approximate"), default="approximate")
    s.add_argument("--max-neighbors", type=int, default=32)
    s.add_argument("--ef-construction", type=int, default=100)
    s.add_argument("--ef-search", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("match", parents=[common], help="resolve mentions against a bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--query", action="append", help="mention text (repeatable)")
    s.add_argument("--mentions", help="mentions.jsonl; accuracy is reported on stderr")
    s.add_argument("-k", type=int, default=10)
    s.add_argument("--rule", choices=RULES, default="vote")
    s.add_argument("--out", help="write JSON lines here instead of stdout")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("eval", parents=[eval_common], help="run the benchmark and write an EvalReport")
    s.add_argument("--config", help="JSON benchmark config (keys override defaults)")
    s.add_argument("--out", default="report.json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("perturb", parents=[common], help="apply seeded character edits to names")
    s.add_argument("name", nargs="*")
    s.add_argument("--input", help="text file, one name per line")
    s.add_argument("--kind", choices=PERTURB_KINDS, required=True)
    s.add_argument("--count", type=int, default=1)
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("serve", parents=[common], help="serve /health and /match over HTTP")
    s.add_argument("--bundle", default=None, help="bundle directory (default: $BUNDLE_DIR)")
    s.add_argument("--bind", default=None, help="host:port (default: $BIND_ADDR or 127.0.0.1:8080)")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sgcn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"sgcn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
