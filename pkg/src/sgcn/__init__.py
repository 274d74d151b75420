"""Entity matching with a contrastively trained (siamese) graph
convolutional network over a knowledge graph of company names."""
from .ann import KnnIndex, KnnResult, recall_at_k
from .baselines import GCNSoftmaxClassifier, MLPSoftmaxClassifier
from .features import NgramEncoderConfig, NgramHashingEncoder, encode_names, encode_ngram
from .gcn import ModelParams, embed_singleton, gcn_forward, init_params
from .graph import (EntityGraph, GraphError, Mention, NodeRecord, SynthConfig, augment_canonical, canonicalize,
                    generate_synthetic_kg, load_graph, normalized_adjacency, validate_graph)
from .matcher import EntityMatcher, MatcherBundle, MatchResult, build_bundle, load_bundle, match_mention, save_bundle
from .siamese import SiameseGCN, TrainConfig, contrastive_loss

__version__ = "0.1.0"

__all__ = [
    "EntityGraph", "EntityMatcher", "GCNSoftmaxClassifier", "GraphError", "KnnIndex", "KnnResult",
    "MLPSoftmaxClassifier", "MatchResult", "MatcherBundle", "Mention", "ModelParams", "NgramEncoderConfig",
    "NgramHashingEncoder", "NodeRecord", "SiameseGCN", "SynthConfig", "TrainConfig", "augment_canonical",
    "build_bundle", "canonicalize", "contrastive_loss", "embed_singleton", "encode_names", "encode_ngram",
    "gcn_forward", "generate_synthetic_kg", "init_params", "load_bundle", "load_graph", "match_mention",
    "normalized_adjacency", "recall_at_k", "save_bundle", "validate_graph",
]
