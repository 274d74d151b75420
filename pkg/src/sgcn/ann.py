"""K-nearest-neighbour search over unit-norm embeddings.

``exact`` mode is a full scan; ``approximate`` mode is a layered navigable
small-world graph (HNSW family). Both rank by Euclidean distance and break
exact ties by the lower stored id.
"""
from __future__ import annotations

import json
import math
import struct
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import _hnsw
from .features import read_matrix, write_matrix

UNIT_TOL = 1e-5
MAX_LEVEL = 16
_U32 = struct.Struct("<I")


class KnnResult(NamedTuple):
    ids: list[int]
    distances: list[float]

    def __iter__(self):
        return iter(zip(self.ids, self.distances))

    def __len__(self):
        return len(self.ids)


def check_unit_rows(Z: np.ndarray, tol: float = UNIT_TOL, what: str = "vector") -> np.ndarray:
    Z = check_array(Z, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(f"{what} row {int(bad[0])} is not unit norm (|v| = {norms[bad[0]]:.6g})")
    return Z


# float32 pre-scan slack on squared distances; the float32 error on unit
# vectors of any practical width is orders of magnitude below this
_PRESCAN_SLACK = 1e-3


def _exact_sq(vectors: np.ndarray, rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = vectors[rows] - q
    return np.einsum("ij,ij->i", diff, diff)


def _rank(rows: np.ndarray, d2: np.ndarray, ids: np.ndarray, k: int):
    order = np.lexsort((ids[rows], d2))[:k]
    return rows[order], d2[order]


class KnnIndex(BaseEstimator):
    """Exact or approximate K-NN index.

    Parameters
    ----------
    mode : {'exact', 'approximate'}, default='approximate'
    max_neighbors : int, default=32
        Neighbour-list bound on every graph layer.
    ef_construction : int, default=100
        Beam width used while inserting points.
    ef_search : int, default=200
        Default beam width at query time.
    seed : int, default=0
        Seeds the layer assignment, the only randomness of the build.

    Stored vectors are rounded to float32 at build time so that an index
    loaded from its saved file behaves identically. Graph traversal and the
    exact-mode pre-scan run in float32; returned distances and the final
    ranking are recomputed in float64.
    """

    def __init__(self, mode="approximate", max_neighbors=32, ef_construction=100, ef_search=200, seed=0):
        self.mode = mode
        self.max_neighbors = max_neighbors
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.seed = seed

    def fit(self, Z, ids=None):
        if self.mode not in ("exact", "approximate"):
            raise ValueError(f"unknown mode {self.mode!r}")
        Z = check_unit_rows(Z, what="stored")
        n = Z.shape[0]
        ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if ids.shape != (n,):
            raise ValueError("ids must have one entry per row")
        if len(np.unique(ids)) != n:
            raise ValueError("duplicate ids")
        self._set_vectors(Z.astype(np.float32))
        self.ids_ = ids
        if self.mode == "approximate":
            if self.max_neighbors < 2:
                raise ValueError("max_neighbors must be >= 2")
            rng = np.random.default_rng(self.seed)
            ml = 1.0 / math.log(self.max_neighbors)
            u = rng.random(n)
            levels = np.minimum(np.floor(-np.log1p(-u) * ml), MAX_LEVEL).astype(np.int64)
            neigh, count, ep = _hnsw.build_graph(self._v32, levels, int(self.max_neighbors),
                                                 int(self.ef_construction))
            self._set_graph(levels, neigh, count, int(ep))
        return self

    def _set_vectors(self, v32):
        self._v32 = np.ascontiguousarray(v32, dtype=np.float32)
        self._sq32 = np.einsum("ij,ij->i", self._v32, self._v32)
        self.vectors_ = self._v32.astype(np.float64)

    def _set_graph(self, levels, neigh, count, ep):
        self.levels_ = levels
        self.neighbors_ = neigh
        self.counts_ = count
        self.entry_point_ = ep
        self.max_level_ = int(levels[ep]) if len(levels) else 0

    @property
    def size(self) -> int:
        check_is_fitted(self, "vectors_")
        return self.vectors_.shape[0]

    @property
    def dim(self) -> int:
        check_is_fitted(self, "vectors_")
        return self.vectors_.shape[1]

    def neighbor_lists(self, layer: int) -> dict[int, np.ndarray]:
        """Neighbour rows of every node present on ``layer``."""
        nodes = np.flatnonzero(self.levels_ >= layer)
        return {int(i): self.neighbors_[layer, i, :self.counts_[layer, i]].astype(np.int64) for i in nodes}

    def _check_query(self, q, k):
        if k < 1:
            raise ValueError("K must be >= 1")
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-1] != self.dim:
            raise ValueError(f"query dimension {q.shape[-1]} does not match index dimension {self.dim}")
        return q

    def query(self, q, k: int = 10, ef: int | None = None) -> KnnResult:
        """Return up to ``k`` stored ids ordered by ascending distance to ``q``."""
        check_is_fitted(self, "vectors_")
        q = self._check_query(q, k)
        if q.ndim != 1:
            raise ValueError("query must be a single vector")
        rows, d2 = self._query_rows(q, k, ef)
        return KnnResult([int(i) for i in self.ids_[rows]], [float(x) for x in np.sqrt(d2)])

    def _query_rows(self, q, k, ef=None):
        """Stored rows and exact float64 squared distances, ranked by (distance, id)."""
        q32 = q.astype(np.float32)
        if self.mode == "exact":
            # float32 scan narrows the field; survivors are re-ranked in float64
            approx = self._sq32 - 2.0 * (self._v32 @ q32) + q32 @ q32
            if k < len(approx):
                kth = np.partition(approx, k - 1)[k - 1]
                rows = np.flatnonzero(approx <= kth + _PRESCAN_SLACK)
            else:
                rows = np.arange(len(approx))
        else:
            rows = _hnsw.search(self._v32, self.neighbors_, self.counts_, self.entry_point_,
                                self.max_level_, q32, int(k), int(ef or self.ef_search))
        return _rank(rows, _exact_sq(self.vectors_, rows, q), self.ids_, k)

    def kneighbors(self, Q, n_neighbors: int = 10, ef: int | None = None):
        """Batch query in scikit-learn's shape: ``(distances, ids)`` arrays."""
        check_is_fitted(self, "vectors_")
        Q = check_array(Q, dtype=np.float64)
        self._check_query(Q, n_neighbors)
        k = min(n_neighbors, self.size)
        dist = np.full((len(Q), k), np.inf)
        out_ids = np.full((len(Q), k), -1, dtype=np.int64)
        for i, q in enumerate(Q):
            rows, d2 = self._query_rows(q, k, ef)
            dist[i, :len(rows)] = np.sqrt(d2)
            out_ids[i, :len(rows)] = self.ids_[rows]
        return dist, out_ids

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        """Header line, FMX1 vectors, then length-prefixed u32 arrays.

        Arrays: stored ids; for approximate indexes also node levels and,
        layer by layer, the neighbour rows of each node on that layer.
        """
        check_is_fitted(self, "vectors_")
        header = {"mode": self.mode, "M": self.dim, "size": self.size, "seed": self.seed,
                  "params": {"max_neighbors": self.max_neighbors, "ef_construction": self.ef_construction,
                             "ef_search": self.ef_search}}
        if self.mode == "approximate":
            header["entry_point"] = self.entry_point_
            header["max_level"] = int(self.levels_.max())
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            write_matrix(fh, self.vectors_)
            _write_u32(fh, self.ids_)
            if self.mode == "approximate":
                _write_u32(fh, self.levels_)
                for layer in range(header["max_level"] + 1):
                    for i in np.flatnonzero(self.levels_ >= layer):
                        _write_u32(fh, self.neighbors_[layer, i, :self.counts_[layer, i]])

    @classmethod
    def load(cls, path) -> "KnnIndex":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            p = header["params"]
            idx = cls(mode=header["mode"], max_neighbors=p["max_neighbors"],
                      ef_construction=p["ef_construction"], ef_search=p["ef_search"], seed=header["seed"])
            vecs = read_matrix(fh)
            ids = _read_u32(fh).astype(np.int64)
            if vecs.shape != (header["size"], header["M"]) or len(ids) != header["size"]:
                raise ValueError("index file header disagrees with its payload")
            idx._set_vectors(vecs)
            idx.ids_ = ids
            if idx.mode == "approximate":
                levels = _read_u32(fh).astype(np.int64)
                n_layers = header["max_level"] + 1
                neigh = np.full((n_layers, len(levels), idx.max_neighbors), -1, dtype=np.int32)
                count = np.zeros((n_layers, len(levels)), dtype=np.int32)
                for layer in range(n_layers):
                    for i in np.flatnonzero(levels >= layer):
                        nb = _read_u32(fh)
                        neigh[layer, i, :len(nb)] = nb
                        count[layer, i] = len(nb)
                idx._set_graph(levels, neigh, count, header["entry_point"])
        return idx


def _write_u32(fh, arr) -> None:
    arr = np.asarray(arr)
    fh.write(_U32.pack(len(arr)))
    fh.write(arr.astype("<u4").tobytes())


def _read_u32(fh) -> np.ndarray:
    head = fh.read(4)
    if len(head) < 4:
        raise ValueError("truncated index file")
    (n,) = _U32.unpack(head)
    payload = fh.read(4 * n)
    if len(payload) < 4 * n:
        raise ValueError("truncated index file")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


def brute_force_knn(vectors: np.ndarray, ids: np.ndarray, q: np.ndarray, k: int) -> list[int]:
    """Reference scan used for recall measurement."""
    d = np.linalg.norm(vectors - q, axis=1)
    return [int(ids[i]) for i in np.lexsort((ids, d))[:k]]


def recall_at_k(idx: KnnIndex, queries, k: int = 10, ef: int | None = None) -> float:
    """Mean fraction of the true ``k`` nearest ids that the index returns."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or len(queries) == 0:
        raise ValueError("empty query set")
    _, got = idx.kneighbors(queries, k, ef=ef)
    hits = 0
    for q, row in zip(queries, got):
        truth = brute_force_knn(idx.vectors_, idx.ids_, q, k)
        hits += len(set(truth) & set(int(i) for i in row))
    return hits / (len(queries) * min(k, idx.size))
