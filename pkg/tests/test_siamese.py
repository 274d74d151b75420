import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import contrastive
from sgcn.graph import SynthConfig, generate_synthetic_kg, normalized_adjacency
from sgcn.features import encode_graph
from sgcn.siamese import (SiameseGCN, SubspacePartition, TrainConfig, contrastive_grad, contrastive_loss, mine_pairs,
                          pair_loss_and_grad, refresh_subspaces, train)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def pair_at_distance(d, dim=4):
    # two unit vectors separated by Euclidean distance d (0 <= d <= 2)
    theta = 2 * np.arcsin(d / 2)
    a = np.zeros(dim)
    a[0] = 1
    b = np.zeros(dim)
    b[0], b[1] = np.cos(theta), np.sin(theta)
    return a, b


# -- loss -------------------------------------------------------------------

@pytest.mark.parametrize("d, y, expected", [(0.0, 1, 0.0), (0.4, 0, 0.36), (0.5, 1, 0.25), (1.5, 0, 0.0)])
def test_loss_examples(d, y, expected):
    a, b = pair_at_distance(d)
    assert contrastive_loss(a, b, y, 1.0) == pytest.approx(expected, abs=1e-12)


def test_loss_length_mismatch():
    with pytest.raises(ValueError):
        contrastive_loss(np.ones(3), np.ones(4), 1)
    with pytest.raises(ValueError):
        contrastive_grad(np.ones(3), np.ones(4), 1)


def test_zero_gradients_at_flat_points():
    a = unit([1, 2, 3])
    assert all(not g.any() for g in contrastive_grad(a, a, 1))
    assert all(not g.any() for g in contrastive_grad(a, a, 0))
    a, b = pair_at_distance(1.5)
    assert all(not g.any() for g in contrastive_grad(a, b, 0, 1.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0, 1]))
def test_grad_matches_finite_differences(seed, y):
    rng = np.random.default_rng(seed)
    a, b = unit(rng.normal(size=5)), unit(rng.normal(size=5))
    d = np.linalg.norm(a - b)
    if abs(d - 1.0) < 1e-3 or d < 1e-3:  # the two kinks of the loss
        return
    ga, gb = contrastive_grad(a, b, y, 1.0)
    h = 1e-6
    for vec, g in ((a, ga), (b, gb)):
        num = np.zeros(5)
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            hi = contrastive(vec + e, b, y, 1.0) if vec is a else contrastive(a, vec + e, y, 1.0)
            lo = contrastive(vec - e, b, y, 1.0) if vec is a else contrastive(a, vec - e, y, 1.0)
            num[i] = (hi - lo) / (2 * h)
        den = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        assert np.max(np.abs(g - num) / den) < 1e-6
    np.testing.assert_array_equal(gb, -ga)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_non_negative_and_vectorized(seed):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(8, 3))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    n1, n2 = rng.integers(0, 8, 20), rng.integers(0, 8, 20)
    y = rng.integers(0, 2, 20)
    losses, _ = pair_loss_and_grad(Z, n1, n2, y, 1.0)
    assert (losses >= 0).all()
    np.testing.assert_allclose(losses, [contrastive(Z[a], Z[b], t, 1.0) for a, b, t in zip(n1, n2, y)], atol=1e-12)


# -- subspace partition ------------------------------------------------------

def test_single_bucket(rng):
    part = refresh_subspaces(rng.normal(size=(10, 3)), 1, seed=0)
    assert (part.assignment == 0).all()


def test_two_clusters(rng):
    Z = np.vstack([rng.normal(size=(50, 4)) * 0.05 + 5, rng.normal(size=(50, 4)) * 0.05 - 5])
    part = refresh_subspaces(Z, 2, seed=3)
    a = part.assignment
    assert len(set(a[:50])) == 1 and len(set(a[50:])) == 1 and a[0] != a[50]


def test_partition_deterministic(rng):
    Z = rng.normal(size=(40, 5))
    assert np.array_equal(refresh_subspaces(Z, 4, 9).assignment, refresh_subspaces(Z, 4, 9).assignment)


def test_every_bucket_used_with_duplicates():
    Z = np.vstack([np.zeros((10, 2)), np.ones((2, 2))])
    part = refresh_subspaces(Z, 4, seed=0, n_iter=10)
    assert part.assignment.shape == (12,) and part.assignment.max() < 4


def test_bucket_count_bounds(rng):
    with pytest.raises(ValueError):
        refresh_subspaces(rng.normal(size=(3, 2)), 4, 0)


# -- pair mining ------------------------------------------------------------

def test_single_node_entities_only_negatives():
    labels = np.array([0, 1])
    pairs = mine_pairs(labels, SubspacePartition(np.zeros(2, dtype=np.int64), 1, 0), 4, 0)
    assert len(pairs) > 0 and not pairs.y.any() and pairs.skipped_anchors == 2


def test_single_entity_yields_no_negatives():
    labels = np.zeros(3, dtype=np.int64)
    pairs = mine_pairs(labels, SubspacePartition(np.zeros(3, dtype=np.int64), 1, 0), 4, 0)
    assert pairs.y.all() and len(pairs) == 6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_pair_labels_consistent(seed, buckets):
    g, _ = generate_synthetic_kg(SynthConfig(entity_count=6, branches_min=1, branches_max=5, mention_count=0, seed=seed))
    rng = np.random.default_rng(seed)
    b = min(buckets, g.n_nodes)
    part = SubspacePartition(rng.integers(0, b, g.n_nodes), b, 0)
    pairs = mine_pairs(g, part, 4, seed)
    labels = g.labels
    assert (pairs.n1 != pairs.n2).all()
    assert np.array_equal(pairs.y == 1, labels[pairs.n1] == labels[pairs.n2])
    # interleaving: the first 2k pairs alternate positive / negative
    k = min(pairs.y.sum(), (1 - pairs.y).sum())
    assert (pairs.y[: 2 * k : 2] == 1).all() and (pairs.y[1 : 2 * k : 2] == 0).all()


def test_negatives_stay_in_bucket(rng):
    labels = np.repeat(np.arange(10), 4)
    assign = rng.integers(0, 3, 40)
    pairs = mine_pairs(labels, SubspacePartition(assign, 3, 0), 4, 1)
    neg = pairs.y == 0
    same_bucket = assign[pairs.n1[neg]] == assign[pairs.n2[neg]]
    # fallback only when the bucket holds no other entity
    for a, ok in zip(pairs.n1[neg], same_bucket):
        if not ok:
            members = np.flatnonzero(assign == assign[a])
            assert (labels[members] == labels[a]).all()


def test_uniform_negatives_with_one_bucket():
    labels = np.repeat(np.arange(5), 4)  # 5 entities of 4 nodes
    part = SubspacePartition(np.zeros(20, dtype=np.int64), 1, 0)
    anchor_ent0 = []
    seed = 0
    while len(anchor_ent0) < 10_000:
        p = mine_pairs(labels, part, 40, seed)
        neg = (p.y == 0) & (labels[p.n1] == 0)
        anchor_ent0.extend(labels[p.n2[neg]])
        seed += 1
    counts = np.bincount(anchor_ent0[:10_000], minlength=5)[1:]
    assert stats.chisquare(counts).pvalue > 1e-3


def test_mining_deterministic(small_kg):
    g, _ = small_kg
    part = SubspacePartition(np.arange(g.n_nodes) % 3, 3, 0)
    a, b = mine_pairs(g, part, 4, 17), mine_pairs(g, part, 4, 17)
    assert all(np.array_equal(x, y) for x, y in zip(a[:3], b[:3]))


# -- training ---------------------------------------------------------------

def test_toy_loss_halves(toy_inputs):
    g, A, X = toy_inputs
    _, hist = train(g.labels, A, X, TrainConfig(seed=0), layer_dims=[X.shape[1], 128, 64])
    assert len(hist) == 30
    assert hist[-1]["mean_loss"] < 0.5 * hist[0]["mean_loss"]
    assert set(hist[0]) == {"epoch", "mean_loss", "pairs", "skipped_anchors"}


def test_zero_learning_rate_is_a_no_op(toy_inputs):
    from sgcn.gcn import init_params
    g, A, X = toy_inputs
    p0 = init_params([X.shape[1], 16, 8], 0)
    p1, _ = train(g.labels, A, X, TrainConfig(learning_rate=0.0, epochs=3, momentum=0.5), params=p0)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p0.weights, p1.weights))


def test_training_is_deterministic(toy_inputs):
    g, A, X = toy_inputs
    runs = [train(g.labels, A, X, TrainConfig(seed=4, epochs=5), layer_dims=[X.shape[1], 8, 4]) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(runs[0][0].weights, runs[1][0].weights))


def test_config_validation():
    for bad in ({"margin": 0}, {"learning_rate": -1}, {"n_subspaces": 0}, {"momentum": 1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_intra_entity_closer_than_inter():
    g, _ = generate_synthetic_kg(SynthConfig(entity_count=200, mention_count=0, seed=1))
    X = encode_graph(g)
    model = SiameseGCN(hidden_dims=(), momentum=0.9, epochs=15, seed=0).fit(X, g.labels,
                                                                           adjacency=normalized_adjacency(g))
    Z = model.embed_graph(X, normalized_adjacency(g))
    labels = g.labels
    rng = np.random.default_rng(0)
    i, j = rng.integers(0, g.n_nodes, (2, 20_000))
    keep = i != j
    d = np.linalg.norm(Z[i[keep]] - Z[j[keep]], axis=1)
    same = labels[i[keep]] == labels[j[keep]]
    assert d[same].mean() < d[~same].mean()


def test_estimator_api(toy_inputs):
    from sklearn.base import clone
    g, A, X = toy_inputs
    est = SiameseGCN(embedding_dim=8, hidden_dims=(16,), epochs=2)
    assert clone(est).get_params() == est.get_params()
    Z = est.fit(X, g.labels, adjacency=A).transform(X)
    assert Z.shape == (4, 8)
    np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-9)
