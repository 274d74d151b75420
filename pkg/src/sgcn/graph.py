"""Knowledge graph of business entities.

Nodes carry a company/branch name and an entity label. Each entity is a
tree (headquarters, branches, subsidiaries); the graph is the disjoint
union of those trees. This module loads and validates such graphs,
generates seeded synthetic ones, adds canonical-name nodes, and builds
the symmetric normalized adjacency used by the GCN layers.
"""
from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

KINDS = ("real", "canonical", "mention")

DEFAULT_LEGAL_SUFFIXES = (
    "ag", "plc", "inc", "ltd", "llc", "gmbh", "sa", "sarl", "nv", "bv",
    "spa", "srl", "co", "corp", "corporation", "limited", "incorporated",
    "kg", "oy", "ab", "as", "se",
)


class GraphError(ValueError):
    """Raised when a graph or one of its input files is invalid."""


@dataclass(frozen=True)
class NodeRecord:
    id: int
    name: str
    entity: int
    kind: str = "real"


@dataclass(frozen=True)
class Mention:
    name: str
    entity: int


@dataclass(frozen=True)
class EntityGraph:
    """Disjoint union of entity trees.

    ``edges`` holds sorted ``(i, j)`` pairs with ``i < j``. ``id_map`` maps
    the ids found in the input files to the dense ids used here; it is the
    identity for generated graphs.
    """

    nodes: tuple[NodeRecord, ...]
    edges: tuple[tuple[int, int], ...]
    entity_count: int
    id_map: dict[int, int] = field(default_factory=dict, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    @property
    def labels(self) -> np.ndarray:
        return np.fromiter((n.entity for n in self.nodes), dtype=np.int64, count=len(self.nodes))

    def entity_members(self) -> list[np.ndarray]:
        """Node ids of each entity, indexed by entity label."""
        labels = self.labels
        order = np.argsort(labels, kind="stable")
        bounds = np.searchsorted(labels[order], np.arange(self.entity_count + 1))
        return [order[bounds[e]:bounds[e + 1]] for e in range(self.entity_count)]


def validate_graph(nodes: Sequence[NodeRecord], edges: Iterable[tuple[int, int]]) -> EntityGraph:
    """Check every structural invariant and return the frozen graph.

    Node ids must already be dense and in order.
    """
    nodes = tuple(nodes)
    n = len(nodes)
    if n == 0:
        raise GraphError("graph has no nodes")
    for i, node in enumerate(nodes):
        if node.id != i:
            raise GraphError(f"node ids must be dense, found id {node.id} at position {i}")
        if not node.name.strip():
            raise GraphError(f"node {i} has an empty name")
        if node.kind not in KINDS:
            raise GraphError(f"node {i} has unknown kind {node.kind!r}")
        if node.kind == "mention":
            raise GraphError(f"node {i} is a mention; mentions cannot be graph nodes")
        if node.entity < 0:
            raise GraphError(f"node {i} has negative entity label")

    labels = np.array([nd.entity for nd in nodes], dtype=np.int64)
    entity_count = int(labels.max()) + 1
    present = np.zeros(entity_count, dtype=bool)
    present[labels] = True
    if not present.all():
        missing = int(np.flatnonzero(~present)[0])
        raise GraphError(f"entity labels are not dense: label {missing} is unused")

    seen: set[tuple[int, int]] = set()
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n):
            raise GraphError(f"unknown node id in edge ({a}, {b})")
        if a == b:
            raise GraphError(f"self-loop on node {a}")
        pair = (a, b) if a < b else (b, a)
        if pair in seen:
            raise GraphError(f"duplicate edge {pair}")
        if labels[a] != labels[b]:
            raise GraphError(f"cross-entity edge {pair} ({labels[a]} vs {labels[b]})")
        seen.add(pair)

    # union-find: an edge joining two already-connected nodes closes a cycle
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in sorted(seen):
        ra, rb = find(a), find(b)
        if ra == rb:
            raise GraphError(f"entity {labels[a]} contains a cycle through edge ({a}, {b})")
        parent[ra] = rb
    roots: dict[int, int] = {}
    for i in range(n):
        r = find(i)
        e = int(labels[i])
        if roots.setdefault(e, r) != r:
            raise GraphError(f"entity {e} is not connected")

    return EntityGraph(nodes=nodes, edges=tuple(sorted(seen)), entity_count=entity_count)


def _read_jsonl(path: Path, required: dict[str, type]) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path}:{lineno}: parse failure: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise GraphError(f"{path}:{lineno}: parse failure: expected an object")
            for key, typ in required.items():
                val = rec.get(key)
                if not isinstance(val, typ) or isinstance(val, bool):
                    raise GraphError(f"{path}:{lineno}: parse failure: field {key!r} missing or not {typ.__name__}")
            records.append(rec)
    return records


def load_graph(nodes_path, edges_path) -> EntityGraph:
    """Read a nodes/edges JSON-lines pair and validate it.

    Sparse input ids are remapped to ``0..N-1`` in file order; the mapping is
    kept on ``EntityGraph.id_map``.
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    raw_nodes = _read_jsonl(nodes_path, {"id": int, "name": str, "entity": int})
    id_map: dict[int, int] = {}
    nodes = []
    for rec in raw_nodes:
        if rec["id"] in id_map:
            raise GraphError(f"duplicate id {rec['id']}")
        id_map[rec["id"]] = len(nodes)
        kind = rec.get("kind", "real")
        nodes.append(NodeRecord(len(nodes), rec["name"].strip(), rec["entity"], kind))
    edges = []
    for rec in _read_jsonl(edges_path, {"src": int, "dst": int}):
        try:
            edges.append((id_map[rec["src"]], id_map[rec["dst"]]))
        except KeyError as exc:
            raise GraphError(f"unknown node id {exc.args[0]}") from None
    g = validate_graph(nodes, edges)
    return EntityGraph(g.nodes, g.edges, g.entity_count, id_map)


def save_graph(g: EntityGraph, nodes_path, edges_path) -> None:
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for nd in g.nodes:
            fh.write(json.dumps({"id": nd.id, "name": nd.name, "entity": nd.entity, "kind": nd.kind},
                                ensure_ascii=False) + "\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for a, b in g.edges:
            fh.write(json.dumps({"src": a, "dst": b}) + "\n")


def load_mentions(path) -> list[Mention]:
    recs = _read_jsonl(Path(path), {"name": str, "entity": int})
    return [Mention(r["name"], r["entity"]) for r in recs]


def save_mentions(mentions: Sequence[Mention], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in mentions:
            fh.write(json.dumps({"name": m.name, "entity": m.entity}, ensure_ascii=False) + "\n")


def normalized_adjacency(g: EntityGraph) -> sp.csr_matrix:
    """Return ``D^-1/2 (A + I) D^-1/2`` with self-loops counted in ``D``."""
    n = g.n_nodes
    if g.edges:
        e = np.asarray(g.edges, dtype=np.int64)
        rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
        cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    else:
        rows = cols = np.arange(n)
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    # sqrt of the product keeps (i, j) and (j, i) bit-identical
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


# ---------------------------------------------------------------------------
# canonical-name augmentation

_PUNCT = re.compile(r"[^\w\s]|_", re.UNICODE)


def canonicalize(name: str, suffixes: Iterable[str] = DEFAULT_LEGAL_SUFFIXES) -> str:
    """Lowercase, drop punctuation and legal-form tokens, collapse spaces.

    >>> canonicalize("Glencore PLC")
    'glencore'
    >>> canonicalize("Valentino Gastronomie A.G.")
    'valentino gastronomie'
    """
    text = unicodedata.normalize("NFKC", name).lower()
    text = _PUNCT.sub("", text)
    drop = set(suffixes)
    return " ".join(tok for tok in text.split() if tok not in drop)


def augment_canonical(g: EntityGraph, suffixes: Iterable[str] = DEFAULT_LEGAL_SUFFIXES) -> EntityGraph:
    """Attach a canonical-name leaf to every real node whose name is not canonical.

    Nodes that already own a canonical neighbour are skipped, so applying
    this twice adds nothing the second time.
    """
    suffixes = tuple(suffixes)
    has_canon = set()
    for a, b in g.edges:
        if g.nodes[a].kind == "canonical":
            has_canon.add(b)
        if g.nodes[b].kind == "canonical":
            has_canon.add(a)
    nodes = list(g.nodes)
    edges = list(g.edges)
    for nd in g.nodes:
        if nd.kind != "real" or nd.id in has_canon:
            continue
        canon = canonicalize(nd.name, suffixes)
        if not canon or canon == nd.name:
            continue
        new_id = len(nodes)
        nodes.append(NodeRecord(new_id, canon, nd.entity, "canonical"))
        edges.append((nd.id, new_id))
    if len(nodes) == g.n_nodes:
        return g
    return EntityGraph(tuple(nodes), tuple(sorted(edges)), g.entity_count, dict(g.id_map))


# ---------------------------------------------------------------------------
# synthetic generator

_SYLLABLES = (
    "ba", "be", "bo", "ca", "co", "da", "de", "di", "do", "fa", "fe", "ga",
    "go", "ha", "ka", "ke", "ki", "ko", "la", "le", "li", "lo", "lu", "ma",
    "me", "mi", "mo", "na", "ne", "ni", "no", "pa", "pe", "po", "ra", "re",
    "ri", "ro", "ru", "sa", "se", "si", "so", "ta", "te", "ti", "to", "va",
    "ve", "vi", "vo", "xa", "za", "zo", "tron", "tek", "vex", "lux", "dyn",
    "gen", "cor", "mar", "nor", "sol", "ter", "val", "ver", "zen",
)
_SECTORS = (
    "Capital", "Logistics", "Foods", "Energy", "Systems", "Pharma", "Trading",
    "Media", "Motors", "Textiles", "Insurance", "Chemicals", "Mining",
    "Software", "Telecom", "Partners", "Industries", "Services",
)
_SUFFIXES = ("AG", "PLC", "Inc", "Ltd", "GmbH", "SA", "LLC", "Corp", "NV", "BV")
_LOCATIONS = (
    "Zurich", "Geneva", "Basel", "London", "Paris", "Berlin", "Milan", "Madrid",
    "Vienna", "Boston", "Chicago", "Toronto", "Tokyo", "Singapore", "Dublin",
    "Oslo", "Lisbon", "Prague", "Munich", "Hamburg", "Lyon", "Bern", "Zug",
    "Lugano",
)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic company database.

    ``anchor_entities`` lists hand-written entities (each a sequence of
    branch names, the first being the tree root) prepended before the
    generated ones.
    """

    entity_count: int = 200
    branches_min: int = 3
    branches_max: int = 12
    suffixes: tuple[str, ...] = _SUFFIXES
    locations: tuple[str, ...] = _LOCATIONS
    syllables: tuple[str, ...] = _SYLLABLES
    sectors: tuple[str, ...] = _SECTORS
    mention_count: int = 400
    mention_typo_rate: float = 0.3
    mention_max_edits: int = 1
    mention_drop_suffix_rate: float = 0.0
    subsidiary_rate: float = 0.5
    max_subsidiaries: int = 2
    anchor_entities: tuple[tuple[str, ...], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.entity_count < 2:
            raise ValueError("entity_count must be >= 2")
        if not 1 <= self.branches_min <= self.branches_max:
            raise ValueError("branch range must satisfy 1 <= min <= max")
        if self.mention_count < 0:
            raise ValueError("mention_count must be >= 0")
        if len(self.anchor_entities) > self.entity_count:
            raise ValueError("more anchor entities than entity_count")


def _base_names(cfg: SynthConfig, rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    syl = cfg.syllables
    capacity = len(syl) ** 2 + len(syl) ** 3
    if count > capacity - len(taken):
        raise ValueError(f"syllable vocabulary too small for {count} distinct base names")
    out: list[str] = []
    seen = set(taken)
    while len(out) < count:
        k = 2 if rng.random() < 0.5 else 3
        word = "".join(syl[i] for i in rng.integers(len(syl), size=k)).capitalize()
        if word in seen:
            continue
        seen.add(word)
        out.append(word)
    return out


def _decorations(cfg: SynthConfig, base: str, rng: np.random.Generator) -> list[str]:
    """All decorated variants of ``base`` in a seeded random order."""
    sector = cfg.sectors[int(rng.integers(len(cfg.sectors)))] if cfg.sectors else ""
    stem = f"{base} {sector}" if sector and rng.random() < 0.4 else base
    variants = []
    for loc in cfg.locations:
        variants.append(f"{stem} {loc}")
        for suf in cfg.suffixes:
            variants.append(f"{stem} {loc} {suf}")
    for suf in cfg.suffixes:
        variants.append(f"{stem} {suf}")
        variants.append(f"{stem} Holding {suf}")
    order = rng.permutation(len(variants))
    return [variants[i] for i in order]


def _typo(name: str, rng: np.random.Generator) -> str:
    chars = list(name)
    kind = int(rng.integers(4))
    pos = int(rng.integers(len(chars)))
    letter = "abcdefghijklmnopqrstuvwxyz"[int(rng.integers(26))]
    if kind == 0 and len(chars) >= 2:
        pos = min(pos, len(chars) - 2)
        chars[pos], chars[pos + 1] = chars[pos + 1], chars[pos]
    elif kind == 1:
        chars.insert(pos, letter)
    elif kind == 2:
        chars[pos] = letter
    elif len(chars) >= 2:
        del chars[pos]
    out = "".join(chars).strip()
    return out or name


def generate_synthetic_kg(cfg: SynthConfig) -> tuple[EntityGraph, list[Mention]]:
    """Generate a seeded company database and held-out mentions.

    Each entity is a tree rooted at its headquarters ``"<Base> <Suffix>"``.
    With probability ``subsidiary_rate`` the entity also owns subsidiaries
    trading under unrelated base names; a subsidiary's own root hangs off
    the headquarters. All other nodes are location/legal-form variants of
    one of the entity's base names, attached below a node of the same
    brand. Mentions are further variants (never added to the graph) of a
    brand chosen in proportion to its node count, optionally with typos.
    """
    rng = np.random.default_rng(cfg.seed)
    anchors = [tuple(a) for a in cfg.anchor_entities]
    taken = {a[0].split()[0] for a in anchors if a}
    n_generated = cfg.entity_count - len(anchors)
    bases = _base_names(cfg, rng, n_generated * (1 + cfg.max_subsidiaries), taken)
    next_base = iter(bases)

    nodes: list[NodeRecord] = []
    edges: list[tuple[int, int]] = []
    brand_pools: list[list[list[str]]] = []
    brand_weights: list[np.ndarray] = []
    roots: list[str] = []

    def add(name: str, entity: int, parent: int | None) -> int:
        nid = len(nodes)
        nodes.append(NodeRecord(nid, name, entity, "real"))
        if parent is not None:
            edges.append((parent, nid))
        return nid

    for e in range(cfg.entity_count):
        if e < len(anchors):
            names = anchors[e]
            first = len(nodes)
            for k, name in enumerate(names):
                add(name, e, first if k else None)
            pool = [p for p in _decorations(cfg, names[0].split()[0], rng) if p not in names]
            brand_pools.append([pool])
            brand_weights.append(np.ones(1))
            roots.append(names[0])
            continue

        size = int(rng.integers(cfg.branches_min, cfg.branches_max + 1))
        n_sub = 0
        if size >= 2 and cfg.max_subsidiaries and rng.random() < cfg.subsidiary_rate:
            n_sub = int(rng.integers(1, min(cfg.max_subsidiaries, size - 1) + 1))
        brands = [next(next_base) for _ in range(1 + n_sub)]
        suffix = lambda: cfg.suffixes[int(rng.integers(len(cfg.suffixes)))] if cfg.suffixes else ""
        pools = []
        members: list[list[int]] = []
        for b, base in enumerate(brands):
            root_name = f"{base} {suffix()}".strip()
            pools.append([p for p in _decorations(cfg, base, rng) if p != root_name])
            parent = None if b == 0 else members[0][0]
            members.append([add(root_name, e, parent)])
        roots.append(nodes[members[0][0]].name)
        for _ in range(size - 1 - n_sub):
            b = 0 if not n_sub or rng.random() < 0.5 else int(rng.integers(1, n_sub + 1))
            group = members[b]
            # bias attachment toward the brand root: a shallow, bushy tree
            parent = group[0] if rng.random() < 0.6 else group[int(rng.integers(len(group)))]
            name = pools[b].pop() if pools[b] else f"{brands[b]} Branch {len(group)}"
            group.append(add(name, e, parent))
        brand_pools.append(pools)
        brand_weights.append(np.array([len(m) for m in members], dtype=np.float64))

    mentions: list[Mention] = []
    for _ in range(cfg.mention_count):
        e = int(rng.integers(cfg.entity_count))
        w = brand_weights[e]
        b = int(rng.choice(len(w), p=w / w.sum()))
        pool = brand_pools[e][b]
        name = pool.pop(int(rng.integers(len(pool)))) if pool else roots[e]
        if rng.random() < cfg.mention_drop_suffix_rate:
            toks = name.split()
            if len(toks) > 1 and toks[-1] in cfg.suffixes:
                name = " ".join(toks[:-1])
        if rng.random() < cfg.mention_typo_rate:
            for _ in range(int(rng.integers(1, cfg.mention_max_edits + 1))):
                name = _typo(name, rng)
        mentions.append(Mention(name, e))
    return validate_graph(nodes, edges), mentions


def split_train_test(mentions: Sequence[Mention], fraction: float, seed: int) -> tuple[list[Mention], list[Mention]]:
    """Seeded partition; ``fraction`` is the share that goes to the test side."""
    if not mentions:
        raise ValueError("empty mention list")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(mentions)
    n_test = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return [mentions[i] for i in train_idx], [mentions[i] for i in test_idx]
