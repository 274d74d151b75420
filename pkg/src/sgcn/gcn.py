"""Graph convolution stack shared by both siamese branches.

``H[l+1] = relu(A H[l] W[l])`` for hidden layers, ``Z = A H[L-1] W[L-1]`` for
the last one, followed (optionally) by L2 row normalization. ``A`` is the
normalized adjacency from :func:`sgcn.graph.normalized_adjacency`; passing
``None`` means the identity, which turns the stack into a plain MLP.
All arithmetic is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .features import read_matrix, write_matrix

EPS = 1e-12
SMALL_ROW = 1e-6


@dataclass
class ModelParams:
    weights: list[np.ndarray]

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights])


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]
    preact: list[np.ndarray]
    raw: np.ndarray
    norms: np.ndarray | None
    normalized: bool
    small_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def init_params(layer_dims, seed: int) -> ModelParams:
    """Glorot-uniform weights, bound ``sqrt(6 / (fan_in + fan_out))``."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    if min(dims) < 1:
        raise ValueError(f"layer dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    return ModelParams(weights)


def _propagate(A, M: np.ndarray) -> np.ndarray:
    if A is None:
        return M
    return np.asarray(A @ M)


def _check_finite(m: np.ndarray, layer: int, what: str) -> None:
    if not np.isfinite(m).all():
        raise FloatingPointError(f"non-finite {what} at layer {layer}")


def gcn_forward(A, X: np.ndarray, params: ModelParams, normalize: bool = True):
    """Run the stack; returns ``(output, trace)``.

    With ``normalize`` each output row is divided by ``norm + 1e-12``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.layer_dims[0]:
        raise ValueError(f"features of shape {X.shape} do not match input dim {params.layer_dims[0]}")
    if A is not None and A.shape != (X.shape[0], X.shape[0]):
        raise ValueError(f"adjacency shape {A.shape} does not match {X.shape[0]} nodes")
    H = X
    inputs, preact = [], []
    last = params.n_layers - 1
    for l, W in enumerate(params.weights):
        inputs.append(H)
        # A (H W) is cheaper than (A H) W whenever the layer narrows
        P = _propagate(A, H @ W)
        _check_finite(P, l, "pre-activation")
        preact.append(P)
        if l < last:
            H = np.maximum(P, 0.0)
    raw = preact[-1]
    if not normalize:
        return raw, ForwardTrace(inputs, preact, raw, None, False)
    norms = np.sqrt(np.einsum("ij,ij->i", raw, raw))
    out = raw / (norms + EPS)[:, None]
    small = np.flatnonzero(norms < SMALL_ROW)
    return out, ForwardTrace(inputs, preact, raw, norms, True, small)


def embed_singleton(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Embed one unseen feature vector as an isolated node (self-loop only)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single feature vector")
    out, _ = gcn_forward(sp.identity(1, format="csr"), x[None, :], params)
    return out[0]


def embed_rows(X: np.ndarray, params: ModelParams) -> np.ndarray:
    """Singleton embedding of many feature rows at once (no edges)."""
    out, _ = gcn_forward(None, X, params)
    return out


def normalize_backward(trace: ForwardTrace, dZ: np.ndarray) -> np.ndarray:
    """Pull ``dL/d(out)`` back through ``v / (|v| + eps)``."""
    v, n = trace.raw, trace.norms
    denom = n + EPS
    vdz = np.einsum("ij,ij->i", v, dZ)
    safe = np.where(n > 0, n, 1.0)
    coef = np.where(n > 0, vdz / (safe * denom ** 2), 0.0)
    dv = dZ / denom[:, None] - v * coef[:, None]
    if trace.small_rows.size:
        dv[trace.small_rows] = 0.0
    return dv


def gcn_backward(trace: ForwardTrace, A, params: ModelParams, dZ: np.ndarray) -> list[np.ndarray]:
    """Gradients of the loss w.r.t. every weight matrix.

    ``A`` must be symmetric (the normalized adjacency is), so ``A^T = A``.
    """
    dZ = np.asarray(dZ, dtype=np.float64)
    if dZ.shape != trace.raw.shape:
        raise ValueError(f"gradient shape {dZ.shape} does not match output {trace.raw.shape}")
    dP = normalize_backward(trace, dZ) if trace.normalized else dZ
    grads: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    for l in range(params.n_layers - 1, -1, -1):
        G = _propagate(A, dP)
        grads[l] = trace.inputs[l].T @ G
        if l > 0:
            dH = G @ params.weights[l].T
            dP = dH * (trace.preact[l - 1] > 0)
    return grads


def save_model(path, params: ModelParams, meta: dict) -> None:
    """One JSON header line, then each weight matrix as an FMX8 block."""
    header = dict(meta, layer_dims=params.layer_dims)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for W in params.weights:
            write_matrix(fh, W, double=True)


def load_model(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        dims = header["layer_dims"]
        weights = [read_matrix(fh) for _ in range(len(dims) - 1)]
    params = ModelParams(weights)
    if params.layer_dims != dims:
        raise ValueError(f"model file layer dims {params.layer_dims} disagree with header {dims}")
    return params, header
