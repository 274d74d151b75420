"""Node input features.

Two sources are supported: a built-in encoder that hashes character
n-grams of a name into a fixed number of buckets, and externally computed
embeddings (e.g. from a transformer language model) shipped as binary
``FMX1`` matrix files.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO, Iterable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import murmurhash3_32

MAGIC32 = b"FMX1"
MAGIC64 = b"FMX8"
_HEADER = struct.Struct("<4sII")


class FeatureFileError(ValueError):
    pass


@dataclass(frozen=True)
class NgramEncoderConfig:
    n: int = 3
    n_features: int = 256
    pad: str = "#"
    seed: int = 0
    signed: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        f = self.n_features
        if f < 2 or f & (f - 1):
            raise ValueError("n_features must be a power of two >= 2")
        if len(self.pad) != 1:
            raise ValueError("pad must be a single character")

    def to_dict(self) -> dict:
        return asdict(self)


def char_ngrams(name: str, n: int, pad: str) -> list[str]:
    """Character n-grams of the lowercased name framed by one pad character
    on each side; a framed text shorter than ``n`` yields itself."""
    text = pad + name.lower() + pad
    if len(text) <= n:
        return [text]
    return [text[i:i + n] for i in range(len(text) - n + 1)]


def encode_ngram(name: str, cfg: NgramEncoderConfig = NgramEncoderConfig()) -> np.ndarray:
    """Hash the padded character n-grams of ``name`` into a unit vector.

    Each n-gram adds ``+1`` (or ``-1`` when signed hashing picks the top
    hash bit) to bucket ``murmur3(ngram) & (F - 1)``.
    """
    if not name or not name.strip():
        raise ValueError("cannot encode an empty name")
    mask = cfg.n_features - 1
    vec = np.zeros(cfg.n_features, dtype=np.float64)
    hashes = [murmurhash3_32(g, seed=cfg.seed, positive=True) for g in char_ngrams(name, cfg.n, cfg.pad)]
    for h in hashes:
        sign = -1.0 if cfg.signed and h >> 31 else 1.0
        vec[h & mask] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every signed contribution cancelled; fall back to unsigned counts
        for h in hashes:
            vec[h & mask] += 1.0
        norm = np.linalg.norm(vec)
    return vec / norm


def encode_names(names: Iterable[str], cfg: NgramEncoderConfig = NgramEncoderConfig()) -> np.ndarray:
    rows = [encode_ngram(nm, cfg) for nm in names]
    if not rows:
        return np.zeros((0, cfg.n_features))
    return np.vstack(rows)


def encode_graph(g, cfg: NgramEncoderConfig = NgramEncoderConfig()) -> np.ndarray:
    """Row ``i`` is the encoding of node ``i``'s name."""
    return encode_names(g.names, cfg)


class NgramHashingEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a sequence of names to unit n-gram vectors.

    Parameters
    ----------
    n : int, default=3
        Character n-gram length.
    n_features : int, default=256
        Number of hash buckets; must be a power of two.
    pad : str, default='#'
        Padding character added once on both ends.
    seed : int, default=0
        Murmur3 seed.
    signed : bool, default=True
        Flip the contribution sign using the top hash bit.
    """

    def __init__(self, n=3, n_features=256, pad="#", seed=0, signed=True):
        self.n = n
        self.n_features = n_features
        self.pad = pad
        self.seed = seed
        self.signed = signed

    @property
    def config(self) -> NgramEncoderConfig:
        return NgramEncoderConfig(self.n, self.n_features, self.pad, self.seed, self.signed)

    def fit(self, X=None, y=None):
        self.config  # validates parameters
        self.n_features_out_ = self.n_features
        return self

    def transform(self, X):
        if isinstance(X, str):
            raise TypeError("expected a sequence of names, got a single string")
        return encode_names(X, self.config)


# ---------------------------------------------------------------------------
# binary matrix files


def write_matrix(fh: BinaryIO, m: np.ndarray, double: bool = False) -> None:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    dtype = "<f8" if double else "<f4"
    fh.write(_HEADER.pack(MAGIC64 if double else MAGIC32, m.shape[0], m.shape[1]))
    fh.write(np.ascontiguousarray(m, dtype=dtype).tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    """Read one FMX1/FMX8 block; FMX1 payloads are returned as float32."""
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FeatureFileError("truncated header")
    magic, n, f = _HEADER.unpack(head)
    if magic == MAGIC32:
        dtype, width = np.dtype("<f4"), 4
    elif magic == MAGIC64:
        dtype, width = np.dtype("<f8"), 8
    else:
        raise FeatureFileError(f"bad magic {magic!r}")
    size = n * f * width
    payload = fh.read(size)
    if len(payload) < size:
        raise FeatureFileError("truncated payload")
    m = np.frombuffer(payload, dtype=dtype).reshape(n, f).astype(dtype.newbyteorder("="))
    if not np.isfinite(m).all():
        raise FeatureFileError("non-finite values in matrix payload")
    return m


def save_feature_file(m: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, m)


def load_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        m = read_matrix(fh)
        if fh.read(1):
            raise FeatureFileError("trailing bytes after payload")
    return m
