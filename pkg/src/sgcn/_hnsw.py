"""Numba kernels for the layered navigable small-world graph.

Layout: ``neigh[layer, node, :count[layer, node]]`` holds row indices of
the neighbours of ``node`` on ``layer``; every layer keeps at most
``neigh.shape[2]`` neighbours per node. Graph distances are squared
Euclidean over float32 vectors; ties order by lower row everywhere.
"""
import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def _sqdist(x, q):
    s = np.float32(0.0)
    for k in range(q.shape[0]):
        t = x[k] - q[k]
        s += t * t
    return s


@njit(cache=True, inline="always")
def _less(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


# Binary heaps over parallel (dist, row) arrays; the caller owns capacity.

@njit(cache=True)
def _push_min(hd, hi, n, d, i):
    k = n
    hd[k] = d
    hi[k] = i
    while k > 0:
        p = (k - 1) >> 1
        if not _less(hd[k], hi[k], hd[p], hi[p]):
            break
        hd[k], hd[p] = hd[p], hd[k]
        hi[k], hi[p] = hi[p], hi[k]
        k = p
    return n + 1


@njit(cache=True)
def _pop_min(hd, hi, n):
    n -= 1
    hd[0] = hd[n]
    hi[0] = hi[n]
    k = 0
    while True:
        c = 2 * k + 1
        if c >= n:
            break
        if c + 1 < n and _less(hd[c + 1], hi[c + 1], hd[c], hi[c]):
            c += 1
        if not _less(hd[c], hi[c], hd[k], hi[k]):
            break
        hd[k], hd[c] = hd[c], hd[k]
        hi[k], hi[c] = hi[c], hi[k]
        k = c
    return n


@njit(cache=True)
def _push_max(hd, hi, n, d, i):
    k = n
    hd[k] = d
    hi[k] = i
    while k > 0:
        p = (k - 1) >> 1
        if not _less(hd[p], hi[p], hd[k], hi[k]):
            break
        hd[k], hd[p] = hd[p], hd[k]
        hi[k], hi[p] = hi[p], hi[k]
        k = p
    return n + 1


@njit(cache=True)
def _pop_max(hd, hi, n):
    n -= 1
    hd[0] = hd[n]
    hi[0] = hi[n]
    k = 0
    while True:
        c = 2 * k + 1
        if c >= n:
            break
        if c + 1 < n and _less(hd[c], hi[c], hd[c + 1], hi[c + 1]):
            c += 1
        if not _less(hd[k], hi[k], hd[c], hi[c]):
            break
        hd[k], hd[c] = hd[c], hd[k]
        hi[k], hi[c] = hi[c], hi[k]
        k = c
    return n


@njit(cache=True)
def _greedy(vecs, neigh, count, q, cur, cur_d, layer):
    changed = True
    while changed:
        changed = False
        for j in range(count[layer, cur]):
            nb = np.int64(neigh[layer, cur, j])
            d = _sqdist(vecs[nb], q)
            if _less(d, nb, cur_d, cur):
                cur, cur_d = nb, d
                changed = True
    return cur, cur_d


@njit(cache=True)
def _search_layer(vecs, neigh, count, q, ep, ep_d, ef, layer, visited, tag, cd, ci, bd, bi):
    """Beam search on one layer; returns the best ``ef`` as sorted
    ``(dists, rows)``. ``cd/ci`` is the candidate scratch heap (grown here
    when full); ``bd/bi`` must hold ``ef + 2`` entries."""
    visited[ep] = tag
    nc = _push_min(cd, ci, 0, ep_d, ep)
    nr = _push_max(bd, bi, 0, ep_d, ep)
    while nc > 0:
        d = cd[0]
        c = ci[0]
        nc = _pop_min(cd, ci, nc)
        if nr >= ef and d > bd[0]:
            break
        for j in range(count[layer, c]):
            nb = np.int64(neigh[layer, c, j])
            if visited[nb] == tag:
                continue
            visited[nb] = tag
            dn = _sqdist(vecs[nb], q)
            if nr < ef or _less(dn, nb, bd[0], bi[0]):
                if nc == cd.shape[0]:
                    cd2 = np.empty(2 * nc, dtype=cd.dtype)
                    ci2 = np.empty(2 * nc, dtype=ci.dtype)
                    cd2[:nc] = cd
                    ci2[:nc] = ci
                    cd, ci = cd2, ci2
                nc = _push_min(cd, ci, nc, dn, nb)
                nr = _push_max(bd, bi, nr, dn, nb)
                if nr > ef:
                    nr = _pop_max(bd, bi, nr)
    out_d = np.empty(nr, dtype=np.float32)
    out_i = np.empty(nr, dtype=np.int64)
    for t in range(nr - 1, -1, -1):
        out_d[t] = bd[0]
        out_i[t] = bi[0]
        nr = _pop_max(bd, bi, nr)
    return out_d, out_i


@njit(cache=True)
def _select(vecs, cand_d, cand_i, m):
    """Diversity heuristic over candidates sorted by distance to the base
    point: keep a candidate only if it is closer to the base point than to
    every neighbour already kept. Free slots are then filled with the
    closest pruned candidates."""
    kept = np.empty(m, dtype=np.int64)
    pruned = np.empty(cand_i.shape[0], dtype=np.int64)
    n = 0
    n_pruned = 0
    for i in range(cand_i.shape[0]):
        c = cand_i[i]
        good = True
        for r in range(n):
            if _sqdist(vecs[kept[r]], vecs[c]) < cand_d[i]:
                good = False
                break
        if good:
            kept[n] = c
            n += 1
            if n == m:
                break
        else:
            pruned[n_pruned] = c
            n_pruned += 1
    for i in range(n_pruned):
        if n == m:
            break
        kept[n] = pruned[i]
        n += 1
    return kept[:n]


@njit(cache=True)
def build_graph(vecs, levels, m, ef_construction):
    n = vecs.shape[0]
    n_layers = levels.max() + 1
    neigh = np.full((n_layers, n, m), -1, dtype=np.int32)
    count = np.zeros((n_layers, n), dtype=np.int32)
    visited = np.zeros(n, dtype=np.int64)
    cd = np.empty(n + 1, dtype=np.float32)
    ci = np.empty(n + 1, dtype=np.int64)
    bd = np.empty(ef_construction + 2, dtype=np.float32)
    bi = np.empty(ef_construction + 2, dtype=np.int64)
    pool_d = np.empty(m + 1, dtype=np.float32)
    pool_i = np.empty(m + 1, dtype=np.int64)
    tag = 0
    ep = 0
    max_level = levels[0]
    for q in range(1, n):
        qv = vecs[q]
        lq = levels[q]
        cur = np.int64(ep)
        cur_d = _sqdist(vecs[cur], qv)
        for layer in range(max_level, lq, -1):
            cur, cur_d = _greedy(vecs, neigh, count, qv, cur, cur_d, layer)
        for layer in range(min(lq, max_level), -1, -1):
            tag += 1
            fd, fi = _search_layer(vecs, neigh, count, qv, cur, cur_d, ef_construction, layer,
                                   visited, tag, cd, ci, bd, bi)
            sel = _select(vecs, fd, fi, m)
            for j in range(sel.shape[0]):
                neigh[layer, q, j] = sel[j]
            count[layer, q] = sel.shape[0]
            for j in range(sel.shape[0]):
                e = sel[j]
                ce = count[layer, e]
                if ce < m:
                    neigh[layer, e, ce] = q
                    count[layer, e] = ce + 1
                    continue
                ev = vecs[e]
                pool_d[0] = _sqdist(vecs[q], ev)
                pool_i[0] = q
                for t in range(ce):
                    nb = np.int64(neigh[layer, e, t])
                    pool_d[t + 1] = _sqdist(vecs[nb], ev)
                    pool_i[t + 1] = nb
                order = np.argsort(pool_d[:ce + 1], kind="mergesort")
                keep = _select(vecs, pool_d[:ce + 1][order], pool_i[:ce + 1][order], m)
                for t in range(keep.shape[0]):
                    neigh[layer, e, t] = keep[t]
                for t in range(keep.shape[0], m):
                    neigh[layer, e, t] = -1
                count[layer, e] = keep.shape[0]
            cur = fi[0]
            cur_d = fd[0]
        if lq > max_level:
            max_level = lq
            ep = q
    return neigh, count, ep


@njit(cache=True)
def search(vecs, neigh, count, ep, max_level, q, k, ef):
    """Rows of the (approximately) ``k`` nearest points, nearest first."""
    n = vecs.shape[0]
    ef = max(ef, k)
    visited = np.zeros(n, dtype=np.uint8)
    cd = np.empty(4 * ef, dtype=np.float32)
    ci = np.empty(4 * ef, dtype=np.int64)
    bd = np.empty(ef + 2, dtype=np.float32)
    bi = np.empty(ef + 2, dtype=np.int64)
    cur = np.int64(ep)
    cur_d = _sqdist(vecs[cur], q)
    for layer in range(max_level, 0, -1):
        cur, cur_d = _greedy(vecs, neigh, count, q, cur, cur_d, layer)
    _, fi = _search_layer(vecs, neigh, count, q, cur, cur_d, ef, 0, visited, 1, cd, ci, bd, bi)
    return fi[:min(k, fi.shape[0])].copy()

