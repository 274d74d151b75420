"""Desk-scale entity-matching benchmark.

Trains the siamese GCN and the two softmax baselines on plain and
canonical-augmented synthetic graphs, and scores each on held-out mentions
and on character-level perturbations of known node names.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .ann import KnnIndex
from .baselines import GCNSoftmaxClassifier, MLPSoftmaxClassifier
from .features import NgramEncoderConfig, encode_graph, encode_names
from .graph import SynthConfig, augment_canonical, generate_synthetic_kg, normalized_adjacency
from .matcher import batch_match, build_bundle
from .siamese import SiameseGCN

log = logging.getLogger(__name__)

PERTURB_KINDS = ("swap", "insert", "replace", "remove")
ALGORITHMS = ("nn", "gcn", "sgcn")
VARIANTS = ("plain", "augmented")

# Published accuracies on a proprietary company test set (BERT features);
# carried in reports for context only.
REFERENCE_ACCURACY = {
    "rls": {"plain": 0.71, "augmented": 0.78},
    "nn": {"plain": 0.71, "augmented": 0.75},
    "gcn": {"plain": 0.56, "augmented": 0.70},
    "sgcn": {"plain": 0.75, "augmented": 0.85},
}


def accuracy(predictions, truth) -> float:
    predictions, truth = np.asarray(predictions), np.asarray(truth)
    if predictions.shape != truth.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {truth.shape}")
    if predictions.size == 0:
        raise ValueError("empty prediction set")
    return float(np.mean(predictions == truth))


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    count: int = 1
    seed: int = 0
    alphabet: str = "abcdefghijklmnopqrstuvwxyz"

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")


def perturb_name(name: str, spec: PerturbSpec) -> str:
    """Apply ``spec.count`` character edits of one kind, deterministically.

    A swap that would exchange two equal characters is re-drawn up to 10
    times.
    """
    min_len = {"swap": 2, "remove": spec.count + 1, "insert": 1, "replace": 1}[spec.kind]
    if len(name) < min_len:
        raise ValueError(f"name {name!r} too short for {spec.count} {spec.kind} edit(s)")
    rng = np.random.default_rng(spec.seed)
    chars = list(name)
    for _ in range(spec.count):
        if spec.kind == "swap":
            for _attempt in range(10):
                i = int(rng.integers(len(chars) - 1))
                if chars[i] != chars[i + 1]:
                    break
            chars[i], chars[i + 1] = chars[i + 1], chars[i]
        elif spec.kind == "insert":
            i = int(rng.integers(len(chars) + 1))
            chars.insert(i, spec.alphabet[int(rng.integers(len(spec.alphabet)))])
        elif spec.kind == "replace":
            i = int(rng.integers(len(chars)))
            options = [c for c in spec.alphabet if c != chars[i].lower()]
            chars[i] = options[int(rng.integers(len(options)))]
        else:
            del chars[int(rng.integers(len(chars)))]
    out = "".join(chars)
    return out if out.strip() else name


def run_baseline_nn(g, X, queries, truth, **params):
    """Feed-forward softmax classifier on node features; returns ``(clf, accuracy)``."""
    if g.entity_count < 2:
        raise ValueError("need at least two entities")
    clf = MLPSoftmaxClassifier(**params).fit(X, g.labels)
    return clf, accuracy(clf.predict(queries), truth)


def run_baseline_gcn_softmax(g, A, X, queries, truth, **params):
    """GCN with a softmax head; mentions are classified as isolated nodes."""
    if g.entity_count < 2:
        raise ValueError("need at least two entities")
    clf = GCNSoftmaxClassifier(**params).fit(X, g.labels, adjacency=A)
    return clf, accuracy(clf.predict(queries), truth)


@dataclass
class BenchConfig:
    """Benchmark protocol. Nested dicts are passed straight to the
    respective constructors."""

    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    synth: dict = field(default_factory=lambda: {
        "entity_count": 200, "branches_min": 3, "branches_max": 12, "mention_count": 400,
        "mention_typo_rate": 0.5, "mention_max_edits": 2, "mention_drop_suffix_rate": 0.5,
        "subsidiary_rate": 0.5, "max_subsidiaries": 2})
    encoder: dict = field(default_factory=lambda: {"n": 3, "n_features": 256})
    sgcn: dict = field(default_factory=lambda: {
        "embedding_dim": 64, "hidden_dims": [], "margin": 2.0, "learning_rate": 0.01, "momentum": 0.9,
        "epochs": 30, "batch_size": 256, "pairs_per_node": 4, "n_subspaces": 8, "refresh_every": 5})
    baseline: dict = field(default_factory=lambda: {
        "hidden_dims": [128], "learning_rate": 0.5, "momentum": 0.9, "epochs": 300})
    index: dict = field(default_factory=lambda: {"mode": "approximate"})
    k: int = 10
    rule: str = "top1"
    perturb_names: int = 200
    algorithms: list[str] = field(default_factory=lambda: list(ALGORITHMS))
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown benchmark config keys: {sorted(unknown)}")
        base = cls()
        for key, val in d.items():
            cur = getattr(base, key)
            setattr(base, key, {**cur, **val} if isinstance(cur, dict) else val)
        return base

    def to_dict(self) -> dict:
        return asdict(self)


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def perturbation_set(g, n_names: int, seed: int):
    """Pick ``n_names`` real nodes and build one single-edit variant per kind."""
    real = [nd for nd in g.nodes if nd.kind == "real"]
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(real), size=min(n_names, len(real)), replace=False))
    chosen = [real[i] for i in pick]
    names = {"clean": [nd.name for nd in chosen]}
    for k, kind in enumerate(PERTURB_KINDS):
        names[kind] = [perturb_name(nd.name, PerturbSpec(kind, 1, seed * 7919 + 31 * k + i))
                       for i, nd in enumerate(chosen)]
    return names, np.array([nd.entity for nd in chosen])


def _evaluate_variant(g, mentions, cfg: BenchConfig, seed: int) -> tuple[dict, dict]:
    enc = NgramEncoderConfig(**cfg.encoder)
    A = normalized_adjacency(g)
    X = encode_graph(g, enc)
    Q = encode_names([m.name for m in mentions], enc)
    truth = np.array([m.entity for m in mentions])
    pnames, ptruth = perturbation_set(g, cfg.perturb_names, seed)
    PQ = {kind: encode_names(v, enc) for kind, v in pnames.items()}
    digest = _digest(X, Q, truth, g.labels)

    out, timing = {"nodes": g.n_nodes, "input_digest": digest}, {}
    for algo in cfg.algorithms:
        t0 = time.perf_counter()
        if algo == "sgcn":
            model = SiameseGCN(seed=seed, **{**cfg.sgcn, "hidden_dims": tuple(cfg.sgcn.get("hidden_dims", ()))})
            model.fit(X, g.labels, adjacency=A)
            bundle = build_bundle(g, model.params_, enc, KnnIndex(seed=seed, **cfg.index))

            def predict(names, _Q):
                return np.array([r.entity for r in batch_match(bundle, names, cfg.k, cfg.rule)])
            extra = {"final_loss": model.history_[-1]["mean_loss"] if model.history_ else None}
        else:
            cls = MLPSoftmaxClassifier if algo == "nn" else GCNSoftmaxClassifier
            params = {**cfg.baseline, "hidden_dims": tuple(cfg.baseline.get("hidden_dims", ()))}
            model = cls(seed=seed, **params).fit(X, g.labels, adjacency=A)

            def predict(names, _Q, model=model):
                return model.predict(_Q)
            extra = {}
        # identical inputs for every algorithm of this (seed, variant)
        assert _digest(X, Q, truth, g.labels) == digest
        acc = accuracy(predict([m.name for m in mentions], Q), truth)
        pert = {kind: accuracy(predict(pnames[kind], PQ[kind]), ptruth) for kind in pnames}
        out[algo] = {"accuracy": acc, "perturbation": pert, **extra}
        timing[algo] = time.perf_counter() - t0
        log.info("seed %d %s: %s accuracy %.3f", seed, g.n_nodes, algo, acc)
    return out, timing


def run_comparison(cfg: BenchConfig) -> dict:
    """Train and score every algorithm on every seed and graph variant.

    Returns the report as a plain dict. All wall-clock measurements live
    under ``"timings"``; everything else is a deterministic function of
    the config.
    """
    runs, timings, failures = [], {}, []
    for seed in cfg.seeds:
        g, mentions = generate_synthetic_kg(SynthConfig(**{**cfg.synth, "seed": seed}))
        run = {"seed": seed, "entities": g.entity_count, "mentions": len(mentions)}
        for variant in cfg.variants:
            gv = augment_canonical(g) if variant == "augmented" else g
            try:
                run[variant], timings[f"{seed}/{variant}"] = _evaluate_variant(gv, mentions, cfg, seed)
            except Exception as exc:  # a failed sub-run is reported, not fatal
                log.exception("run seed=%d variant=%s failed", seed, variant)
                run[variant] = {"failed": f"{type(exc).__name__}: {exc}"}
                failures.append(f"{seed}/{variant}")
        runs.append(run)
    return {"config": cfg.to_dict(), "runs": runs, "summary": summarize(runs, cfg),
            "failures": failures, "reference": REFERENCE_ACCURACY, "timings": timings}


def summarize(runs: list[dict], cfg: BenchConfig) -> dict:
    summary = {}
    for variant in cfg.variants:
        summary[variant] = {}
        for algo in cfg.algorithms:
            accs = [r[variant][algo]["accuracy"] for r in runs if algo in r.get(variant, {})]
            pert = {}
            for kind in ("clean", *PERTURB_KINDS):
                vals = [r[variant][algo]["perturbation"][kind] for r in runs if algo in r.get(variant, {})]
                pert[kind] = float(np.mean(vals)) if vals else None
            summary[variant][algo] = {"mean_accuracy": float(np.mean(accs)) if accs else None,
                                      "accuracies": accs, "perturbation": pert}
    return summary


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def render_table(report: dict) -> str:
    """Aligned accuracy table: one row per algorithm, one column per graph."""
    names = {"rls": "RLS (reference only)", "nn": "NN", "gcn": "GCN", "sgcn": "S-GCN"}
    summary = report["summary"]
    variants = list(summary)
    head = ["Algorithm"] + [f"KG {v}" for v in variants] + [f"reference {v}" for v in variants]
    rows = []
    for algo in ("rls", *ALGORITHMS):
        cells = [names[algo]]
        for v in variants:
            m = summary[v].get(algo, {}).get("mean_accuracy")
            cells.append("-" if m is None else f"{m:.3f}")
        for v in variants:
            cells.append(f"{report['reference'][algo][v]:.2f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line(head), "-" * len(line(head))] + [line(r) for r in rows]
    return "\n".join(out) + "\n"
