"""Softmax classification baselines.

``GCNSoftmaxClassifier`` is the GCN stack with a softmax over entity
labels in place of the normalized embedding. ``MLPSoftmaxClassifier`` is
the same network with the identity adjacency, i.e. a two-layer
feed-forward classifier on node features. Both predict unseen rows as
isolated nodes, the same pathway the siamese model uses for mentions.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .gcn import ModelParams, gcn_backward, gcn_forward, init_params


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_and_grad(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = len(y)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def softmax_objective(A, X, params: ModelParams, y) -> tuple[float, list[np.ndarray]]:
    logits, trace = gcn_forward(A, X, params, normalize=False)
    loss, dlogits = cross_entropy_and_grad(logits, y)
    return loss, gcn_backward(trace, A, params, dlogits)


class GCNSoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """GCN with a softmax output layer trained by full-batch gradient descent.

    Parameters
    ----------
    hidden_dims : tuple of int, default=(128,)
        Widths of the rectified hidden layers.
    learning_rate : float, default=0.5
    momentum : float, default=0.9
    epochs : int, default=300
        Number of full-batch steps.
    seed : int, default=0
    """

    uses_graph = True

    def __init__(self, hidden_dims=(128,), learning_rate=0.5, momentum=0.9, epochs=300, seed=0):
        self.hidden_dims = hidden_dims
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y, adjacency=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two entities")
        A = adjacency if self.uses_graph else None
        params = init_params([X.shape[1], *self.hidden_dims, len(self.classes_)], self.seed)
        velocity = [np.zeros_like(W) for W in params.weights]
        self.loss_history_ = []
        for step in range(self.epochs):
            loss, grads = softmax_objective(A, X, params, y_idx)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            self.loss_history_.append(loss)
            for W, v, g in zip(params.weights, velocity, grads):
                v *= self.momentum
                v -= self.learning_rate * g
                W += v
        self.params_ = params
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        logits, _ = gcn_forward(None, check_array(X, dtype=np.float64), self.params_, normalize=False)
        return logits

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class MLPSoftmaxClassifier(GCNSoftmaxClassifier):
    """Two dense layers and a softmax; the graph is ignored."""

    uses_graph = False
