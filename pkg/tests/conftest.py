import numpy as np
import pytest

from sgcn.features import NgramEncoderConfig, encode_graph
from sgcn.graph import NodeRecord, SynthConfig, generate_synthetic_kg, normalized_adjacency, validate_graph

# Two entities whose names share most of their n-grams, so the untrained
# model confuses them and training has real work to do.
TOY_NAMES = ["Acme Holding AG", "Blip Acme Zurich AG", "Blip Holding AG", "Acme Blip Zurich AG"]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_graph():
    nodes = [NodeRecord(i, n, i // 2) for i, n in enumerate(TOY_NAMES)]
    return validate_graph(nodes, [(0, 1), (2, 3)])


@pytest.fixture
def toy_inputs(toy_graph):
    return toy_graph, normalized_adjacency(toy_graph), encode_graph(toy_graph)


@pytest.fixture(scope="session")
def small_kg():
    return generate_synthetic_kg(SynthConfig(entity_count=20, branches_min=2, branches_max=6,
                                             mention_count=40, seed=3))


@pytest.fixture(scope="session")
def small_bundle(small_kg):
    from sgcn.matcher import build_bundle
    from sgcn.siamese import SiameseGCN

    g, _ = small_kg
    enc = NgramEncoderConfig()
    X = encode_graph(g, enc)
    model = SiameseGCN(hidden_dims=(), momentum=0.9, epochs=20, seed=0).fit(X, g.labels, adjacency=normalized_adjacency(g))
    return build_bundle(g, model.params_, enc)
