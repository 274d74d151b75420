"""Siamese training of the shared GCN with a contrastive pair loss.

Both members of a pair are embedded by the same :class:`ModelParams`; the
"two networks" are two row lookups into one forward pass. Informative
negatives come from a periodic k-means bucketing of the current
embeddings: an anchor's negatives are drawn from other entities that fall
in its own bucket.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .gcn import ModelParams, embed_rows, gcn_backward, gcn_forward, init_params

log = logging.getLogger(__name__)


def contrastive_loss(g1, g2, y: int, margin: float = 1.0) -> float:
    """``y d^2 + (1 - y) max(0, m - d)^2`` with ``d = |g1 - g2|``."""
    g1, g2 = np.asarray(g1, dtype=np.float64), np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValueError(f"embedding length mismatch: {g1.shape} vs {g2.shape}")
    d = float(np.linalg.norm(g1 - g2))
    if y:
        return d * d
    h = max(0.0, margin - d)
    return h * h


def contrastive_grad(g1, g2, y: int, margin: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    g1, g2 = np.asarray(g1, dtype=np.float64), np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValueError(f"embedding length mismatch: {g1.shape} vs {g2.shape}")
    diff = g1 - g2
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        return np.zeros_like(g1), np.zeros_like(g2)
    coef = 2.0 if y else -2.0 * max(0.0, margin - d) / d
    return coef * diff, -coef * diff


def pair_loss_and_grad(Z: np.ndarray, n1, n2, y, margin: float):
    """Vectorized contrastive loss over pairs of rows of ``Z``.

    Returns per-pair losses and ``dZ`` for the *mean* loss, accumulated in
    pair order.
    """
    diff = Z[n1] - Z[n2]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    hinge = np.maximum(0.0, margin - d)
    pos = y == 1
    losses = np.where(pos, d * d, hinge * hinge)
    safe = np.where(d > 0, d, 1.0)
    coef = np.where(pos, 2.0, np.where(d > 0, -2.0 * hinge / safe, 0.0))
    g = diff * (coef / len(n1))[:, None]
    dZ = np.zeros_like(Z)
    np.add.at(dZ, n1, g)
    np.add.at(dZ, n2, -g)
    return losses, dZ


# ---------------------------------------------------------------------------
# informative pair selection


class SubspacePartition(NamedTuple):
    assignment: np.ndarray
    n_buckets: int
    epoch: int


def refresh_subspaces(Z: np.ndarray, n_buckets: int, seed: int, epoch: int = 0,
                      n_iter: int = 10) -> SubspacePartition:
    """Seeded k-means bucketing of embedding rows.

    k-means++ seeding, then exactly ``n_iter`` Lloyd iterations. A bucket
    that empties is re-seeded with the point of the largest bucket that is
    farthest from that bucket's centroid.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if not 1 <= n_buckets <= n:
        raise ValueError(f"bucket count {n_buckets} must lie in [1, {n}]")
    if n_buckets == 1:
        return SubspacePartition(np.zeros(n, dtype=np.int64), 1, epoch)
    rng = np.random.default_rng(seed)
    sq = np.einsum("ij,ij->i", Z, Z)

    centers = np.empty((n_buckets, Z.shape[1]))
    centers[0] = Z[rng.integers(n)]
    closest = np.maximum(sq - 2 * Z @ centers[0] + centers[0] @ centers[0], 0.0)
    for k in range(1, n_buckets):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[k] = Z[idx]
        closest = np.minimum(closest, np.maximum(sq - 2 * Z @ centers[k] + centers[k] @ centers[k], 0.0))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        dist = sq[:, None] - 2 * Z @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
        assign = np.argmin(dist, axis=1)
        counts = np.bincount(assign, minlength=n_buckets)
        for k in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            c = Z[members].mean(axis=0)
            far = members[int(np.argmax(((Z[members] - c) ** 2).sum(axis=1)))]
            assign[far] = k
            counts[big] -= 1
            counts[k] += 1
        for k in range(n_buckets):
            centers[k] = Z[assign == k].mean(axis=0)
    dist = sq[:, None] - 2 * Z @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
    assign = np.argmin(dist, axis=1)
    return SubspacePartition(assign.astype(np.int64), n_buckets, epoch)


class PairSet(NamedTuple):
    n1: np.ndarray
    n2: np.ndarray
    y: np.ndarray
    skipped_anchors: int

    def __len__(self):
        return len(self.n1)

    def batches(self, batch_size: int):
        for start in range(0, len(self.n1), batch_size):
            sl = slice(start, start + batch_size)
            yield self.n1[sl], self.n2[sl], self.y[sl]


class _EntityIndex:
    """Nodes sorted by entity, with contiguous ranges per entity."""

    def __init__(self, labels: np.ndarray):
        self.labels = labels
        self.order = np.argsort(labels, kind="stable")
        n_ent = int(labels.max()) + 1
        self.start = np.searchsorted(labels[self.order], np.arange(n_ent))
        self.size = np.bincount(labels, minlength=n_ent)
        self.rank = np.empty_like(self.order)
        self.rank[self.order] = np.arange(len(labels))


def mine_pairs(labels, part: SubspacePartition, pairs_per_node: int, epoch_seed: int) -> PairSet:
    """Sample positive and hard-negative pairs for every anchor node.

    Each anchor gets ``max(1, pairs_per_node // 2)`` positives (uniform over
    other members of its entity) and as many negatives (uniform over
    other-entity nodes of its bucket, or over all other-entity nodes when
    the bucket has none). Positives and negatives are shuffled separately
    and interleaved so every batch is half positive.
    """
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    n = len(labels)
    rng = np.random.default_rng(epoch_seed)
    ent = _EntityIndex(labels)
    per = max(1, pairs_per_node // 2)
    anchors = np.repeat(np.arange(n), per)
    a_ent = labels[anchors]

    # positives
    has_pos = ent.size[a_ent] > 1
    skipped = int((ent.size[labels] == 1).sum())
    pa = anchors[has_pos]
    pe = a_ent[has_pos]
    r = (rng.random(len(pa)) * (ent.size[pe] - 1)).astype(np.int64)
    own = ent.rank[pa] - ent.start[pe]
    r = r + (r >= own)
    pos_n2 = ent.order[ent.start[pe] + r]

    # hard negatives from the anchor's bucket, by rejection then explicit fallback
    assign = part.assignment
    b_order = np.argsort(assign, kind="stable")
    b_start = np.searchsorted(assign[b_order], np.arange(part.n_buckets + 1))
    bucket = assign[anchors]
    bsize = b_start[bucket + 1] - b_start[bucket]
    neg_n2 = np.full(len(anchors), -1, dtype=np.int64)
    pending = np.arange(len(anchors))
    for _ in range(8):
        if pending.size == 0:
            break
        pick = b_order[b_start[bucket[pending]] + (rng.random(pending.size) * bsize[pending]).astype(np.int64)]
        ok = labels[pick] != a_ent[pending]
        neg_n2[pending[ok]] = pick[ok]
        pending = pending[~ok]
    for i in pending:
        a = anchors[i]
        members = b_order[b_start[bucket[i]]:b_start[bucket[i] + 1]]
        cand = members[labels[members] != a_ent[i]]
        e = a_ent[i]
        if cand.size:
            neg_n2[i] = cand[int(rng.integers(cand.size))]
        elif n > ent.size[e]:
            k = int(rng.integers(n - ent.size[e]))
            k = k + ent.size[e] if k >= ent.start[e] else k
            neg_n2[i] = ent.order[k]
    valid = neg_n2 >= 0  # false only when a single entity exists
    neg_n1 = anchors[valid]
    neg_n2 = neg_n2[valid]

    pp = rng.permutation(len(pa))
    pn = rng.permutation(len(neg_n1))
    pos = (pa[pp], pos_n2[pp])
    neg = (neg_n1[pn], neg_n2[pn])
    k = min(len(pp), len(pn))
    n1 = np.concatenate([np.column_stack([pos[0][:k], neg[0][:k]]).ravel(), pos[0][k:], neg[0][k:]])
    n2 = np.concatenate([np.column_stack([pos[1][:k], neg[1][:k]]).ravel(), pos[1][k:], neg[1][k:]])
    y = np.concatenate([np.tile([1, 0], k), np.ones(len(pp) - k, dtype=np.int64),
                        np.zeros(len(pn) - k, dtype=np.int64)]).astype(np.int64)
    return PairSet(n1.astype(np.int64), n2.astype(np.int64), y, skipped)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.0
    epochs: int = 30
    batch_size: int = 256
    pairs_per_node: int = 4
    n_subspaces: int = 8
    refresh_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.n_subspaces < 1 or self.batch_size < 1 or self.refresh_every < 1:
            raise ValueError("n_subspaces, batch_size and refresh_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def train(labels, A, X: np.ndarray, cfg: TrainConfig, layer_dims=None,
          params: ModelParams | None = None) -> tuple[ModelParams, list[dict]]:
    """Optimize the shared GCN with the contrastive loss.

    Returns the trained parameters and one metrics record per epoch.
    """
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    if params is None:
        if layer_dims is None:
            raise ValueError("either layer_dims or params is required")
        params = init_params(layer_dims, cfg.seed)
    else:
        params = params.copy()
    if params.layer_dims[0] != X.shape[1]:
        raise ValueError("feature width does not match the first layer")
    n_buckets = min(cfg.n_subspaces, X.shape[0])
    velocity = [np.zeros_like(W) for W in params.weights]
    history = []
    part = None
    for epoch in range(cfg.epochs):
        if part is None or epoch % cfg.refresh_every == 0:
            Z, _ = gcn_forward(A, X, params)
            part = refresh_subspaces(Z, n_buckets, cfg.seed + 7919 * epoch, epoch)
        pairs = mine_pairs(labels, part, cfg.pairs_per_node, cfg.seed * 1_000_003 + epoch)
        total = 0.0
        for b, (n1, n2, y) in enumerate(pairs.batches(cfg.batch_size)):
            Z, trace = gcn_forward(A, X, params)
            losses, dZ = pair_loss_and_grad(Z, n1, n2, y, cfg.margin)
            batch_loss = float(losses.sum())
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            total += batch_loss
            grads = gcn_backward(trace, A, params, dZ)
            for W, v, g in zip(params.weights, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                W += v
        mean_loss = total / max(len(pairs), 1)
        history.append({"epoch": epoch, "mean_loss": mean_loss, "pairs": len(pairs),
                        "skipped_anchors": pairs.skipped_anchors})
        log.debug("epoch %d mean loss %.6f", epoch, mean_loss)
    return params, history


class SiameseGCN(TransformerMixin, BaseEstimator):
    """Contrastively trained GCN producing unit-norm node embeddings.

    ``fit`` takes node features, entity labels and the normalized adjacency
    of the training graph. ``transform`` embeds unseen rows as isolated
    nodes; :meth:`embed_graph` embeds the nodes of a graph with their
    neighbourhoods.
    """

    def __init__(self, embedding_dim=64, hidden_dims=(128,), margin=1.0, learning_rate=0.01,
                 momentum=0.0, epochs=30, batch_size=256, pairs_per_node=4, n_subspaces=8,
                 refresh_every=5, seed=0):
        self.embedding_dim = embedding_dim
        self.hidden_dims = hidden_dims
        self.margin = margin
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.pairs_per_node = pairs_per_node
        self.n_subspaces = n_subspaces
        self.refresh_every = refresh_every
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.margin, self.learning_rate, self.momentum, self.epochs, self.batch_size,
                           self.pairs_per_node, self.n_subspaces, self.refresh_every, self.seed)

    def fit(self, X, y, adjacency=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != X.shape[0]:
            raise ValueError("X and y have different lengths")
        dims = [X.shape[1], *self.hidden_dims, self.embedding_dim]
        self.params_, self.history_ = train(y, adjacency, X, self.train_config(), layer_dims=dims)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return embed_rows(check_array(X, dtype=np.float64), self.params_)

    def embed_graph(self, X, adjacency):
        check_is_fitted(self, "params_")
        Z, _ = gcn_forward(adjacency, check_array(X, dtype=np.float64), self.params_)
        return Z
