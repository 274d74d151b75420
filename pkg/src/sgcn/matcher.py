"""Resolve unseen entity mentions against a trained graph.

A mention is encoded, embedded as an isolated node with the trained
weights, and looked up in a K-NN index of the graph's node embeddings.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .ann import KnnIndex
from .features import NgramEncoderConfig, encode_graph, encode_ngram
from .gcn import ModelParams, embed_singleton, gcn_forward, load_model, save_model
from .graph import EntityGraph, load_graph, normalized_adjacency, save_graph

RULES = ("top1", "vote")
BUNDLE_FILES = {"model": "model.bin", "index": "index.bin", "nodes": "nodes.jsonl",
                "edges": "edges.jsonl", "encoder": "encoder.json"}


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    entity: int
    node: int
    name: str
    distance: float
    votes: int


@dataclass(frozen=True)
class MatchResult:
    """``matches`` holds one row per distinct entity among the K neighbours,
    ordered by the distance of its closest node. ``entity`` is the
    resolution under ``rule``."""

    query: str
    entity: int
    matches: tuple[Candidate, ...]
    rule: str
    k: int

    def to_dict(self) -> dict:
        return {"query": self.query, "entity": self.entity, "rule": self.rule, "k": self.k,
                "matches": [{"entity": c.entity, "node": c.node, "name": c.name,
                             "distance": round(c.distance, 6), "votes": c.votes} for c in self.matches]}


@dataclass
class MatcherBundle:
    params: ModelParams
    encoder: NgramEncoderConfig
    index: KnnIndex
    graph: EntityGraph
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.n_features != self.params.layer_dims[0]:
            raise BundleError(f"encoder width {self.encoder.n_features} does not match model input "
                              f"{self.params.layer_dims[0]}")
        if self.index.size and (self.index.ids_.min() < 0 or self.index.ids_.max() >= self.graph.n_nodes):
            raise BundleError("index refers to node ids missing from the node table")
        self._names = self.graph.names
        self._labels = self.graph.labels


def build_bundle(g: EntityGraph, params: ModelParams, encoder: NgramEncoderConfig,
                 index: KnnIndex | None = None, meta: dict | None = None) -> MatcherBundle:
    """Embed every node of ``g`` with its neighbourhood and index the result."""
    if encoder.n_features != params.layer_dims[0]:
        raise BundleError(f"encoder width {encoder.n_features} does not match model input {params.layer_dims[0]}")
    Z, _ = gcn_forward(normalized_adjacency(g), encode_graph(g, encoder), params)
    index = (index if index is not None else KnnIndex()).fit(Z, np.arange(g.n_nodes))
    return MatcherBundle(params, encoder, index, g, dict(meta or {}))


def resolve(ids: Sequence[int], dists: Sequence[float], labels, names, rule: str) -> tuple[int, tuple[Candidate, ...]]:
    """Group neighbours by entity and pick the winner under ``rule``.

    ``vote``: most neighbours, then smaller best distance, then lower entity id.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}")
    best: dict[int, list] = {}
    for node, d in zip(ids, dists):
        e = int(labels[node])
        if e not in best:
            best[e] = [node, d, 0]
        best[e][2] += 1
    cands = tuple(Candidate(e, int(node), names[node], float(d), votes)
                  for e, (node, d, votes) in sorted(best.items(), key=lambda kv: (kv[1][1], kv[0])))
    if rule == "top1":
        return cands[0].entity, cands
    winner = min(cands, key=lambda c: (-c.votes, c.distance, c.entity))
    return winner.entity, cands


def match_vector(b: MatcherBundle, x: np.ndarray, k: int = 10, rule: str = "vote", query: str = "") -> MatchResult:
    if b.index.size == 0:
        raise BundleError("empty index")
    gamma = embed_singleton(x, b.params)
    res = b.index.query(gamma, k)
    entity, cands = resolve(res.ids, res.distances, b._labels, b._names, rule)
    return MatchResult(query, entity, cands, rule, k)


def match_mention(b: MatcherBundle, name: str, k: int = 10, rule: str = "vote") -> MatchResult:
    if not name or not name.strip():
        raise ValueError("empty mention")
    return match_vector(b, encode_ngram(name, b.encoder), k, rule, query=name)


def batch_match(b: MatcherBundle, names: Sequence[str], k: int = 10, rule: str = "vote") -> list[MatchResult]:
    out = []
    for i, name in enumerate(names):
        try:
            out.append(match_mention(b, name, k, rule))
        except ValueError as exc:
            raise ValueError(f"mention {i}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# bundle directory


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_bundle(b: MatcherBundle, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(d / BUNDLE_FILES["model"], b.params, b.meta)
    b.index.save(d / BUNDLE_FILES["index"])
    save_graph(b.graph, d / BUNDLE_FILES["nodes"], d / BUNDLE_FILES["edges"])
    (d / BUNDLE_FILES["encoder"]).write_text(json.dumps(b.encoder.to_dict(), sort_keys=True) + "\n")
    manifest = {"files": {key: {"path": fn, "sha256": _digest(d / fn)} for key, fn in BUNDLE_FILES.items()}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_bundle(directory, verify: bool = True) -> MatcherBundle:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise BundleError(f"no manifest.json in {d}") from None
    if verify:
        for key, entry in manifest["files"].items():
            if _digest(d / entry["path"]) != entry["sha256"]:
                raise BundleError(f"digest mismatch for {entry['path']}")
    params, meta = load_model(d / BUNDLE_FILES["model"])
    encoder = NgramEncoderConfig(**json.loads((d / BUNDLE_FILES["encoder"]).read_text()))
    index = KnnIndex.load(d / BUNDLE_FILES["index"])
    g = load_graph(d / BUNDLE_FILES["nodes"], d / BUNDLE_FILES["edges"])
    b = MatcherBundle(params, encoder, index, g, meta)
    b.manifest = manifest
    return b


class EntityMatcher(ClassifierMixin, BaseEstimator):
    """Predict the entity of a name by nearest-neighbour search in a
    trained embedding space.

    Parameters
    ----------
    embedder : SiameseGCN
        Unfitted siamese model; cloned parameters are used as-is.
    encoder : NgramHashingEncoder
    k : int, default=10
    rule : {'vote', 'top1'}, default='vote'
    index : KnnIndex or None
        Index prototype; ``None`` builds an approximate index with defaults.
    """

    def __init__(self, embedder=None, encoder=None, k=10, rule="vote", index=None):
        self.embedder = embedder
        self.encoder = encoder
        self.k = k
        self.rule = rule
        self.index = index

    def fit(self, graph: EntityGraph, y=None):
        """Fit on a graph; ``y`` is ignored (labels come from the graph)."""
        from sklearn.base import clone
        from .features import NgramHashingEncoder
        from .siamese import SiameseGCN

        enc = clone(self.encoder) if self.encoder is not None else NgramHashingEncoder()
        emb = clone(self.embedder) if self.embedder is not None else SiameseGCN()
        X = enc.fit(graph.names).transform(graph.names)
        emb.fit(X, graph.labels, adjacency=normalized_adjacency(graph))
        idx = clone(self.index) if self.index is not None else KnnIndex()
        self.bundle_ = build_bundle(graph, emb.params_, enc.config, idx)
        self.embedder_ = emb
        self.classes_ = np.arange(graph.entity_count)
        return self

    def predict(self, names):
        check_is_fitted(self, "bundle_")
        return np.array([r.entity for r in batch_match(self.bundle_, list(names), self.k, self.rule)])
