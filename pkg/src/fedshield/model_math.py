"""Small ReLU classifier trained with hand-written backpropagation.

Parameters live in a single flat vector so that local updates, representative
models and aggregates are all plain numpy arrays. The flattening order is
layer-major, weights before biases, with each weight matrix of shape
``(fan_in, fan_out)`` stored row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import LabeledDataset


class ShapeError(ValueError):
    """Raised when parameters, features and architecture disagree."""


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_classes: int
    hidden_dims: Sequence[int] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def layer_dims(self) -> List[tuple]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)


def unflatten(params: np.ndarray, arch: Architecture):
    """Split a flat vector into ``[(W, b), ...]`` views, one pair per layer."""
    params = np.asarray(params, dtype=float)
    if params.ndim != 1 or params.size != arch.num_params:
        raise ShapeError(
            f"expected a flat vector of {arch.num_params} parameters, got shape {params.shape}"
        )
    layers, pos = [], 0
    for fan_in, fan_out in arch.layer_dims:
        W = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_params(arch: Architecture, seed) -> np.ndarray:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in arch.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return flatten(layers)


def _as_batch(x, arch: Architecture) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"expected features with {arch.input_dim} columns, got shape {x.shape}")
    return x


def _forward_cache(params, arch, x):
    layers = unflatten(params, arch)
    acts = [x]
    pre = []
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return layers, acts, pre


def forward(params: np.ndarray, arch: Architecture, x) -> np.ndarray:
    """Logits of shape ``(batch, num_classes)``."""
    x = _as_batch(x, arch)
    return _forward_cache(params, arch, x)[1][-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.atleast_2d(logits)))


def per_sample_loss(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels, dtype=int).ravel()
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("logits and labels have different lengths")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    return -log_softmax(logits)[np.arange(labels.size), labels]


def cross_entropy(logits: np.ndarray, labels) -> float:
    return float(per_sample_loss(logits, labels).mean())


def loss(params, arch, x, y) -> float:
    return cross_entropy(forward(params, arch, x), y)


def gradient(params: np.ndarray, arch: Architecture, x, y) -> np.ndarray:
    """Exact gradient of the mean cross-entropy, flattened like ``params``."""
    x = _as_batch(x, arch)
    y = np.asarray(y, dtype=int).ravel()
    if y.size == 0:
        raise ValueError("empty batch")
    layers, acts, pre = _forward_cache(params, arch, x)
    delta = softmax(acts[-1])
    delta[np.arange(y.size), y] -= 1.0
    delta /= y.size
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ W.T) * (pre[i - 1] > 0)
    return flatten(grads[::-1])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    learning_rate: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("invalid training configuration")


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled minibatch index arrays for one epoch; the last batch may be short."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_train(global_params, arch, data: LabeledDataset, cfg: TrainConfig, batch_hook=None):
    """Run minibatch SGD from ``global_params`` and return ``final - global``.

    ``batch_hook(x, y, rng) -> (x, y)`` may rewrite each batch before the step;
    the backdoor attack uses it to poison a fixed number of samples per batch.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = np.array(global_params, dtype=float, copy=True)
    for _ in range(cfg.epochs):
        for idx in iter_batches(len(data), cfg.batch_size, rng):
            x, y = data.features[idx], data.labels[idx]
            if batch_hook is not None:
                x, y = batch_hook(x, y, rng)
            params -= cfg.learning_rate * gradient(params, arch, x, y)
    return params - global_params


def predict(params, arch, x) -> np.ndarray:
    return forward(params, arch, x).argmax(axis=1)


# vector algebra -------------------------------------------------------------

def add(a, b):
    return np.asarray(a, dtype=float) + np.asarray(b, dtype=float)


def scale(a, s):
    return float(s) * np.asarray(a, dtype=float)


def l2_norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float)))


def dot(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError("vectors differ in length")
    return float(a @ b)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either is the zero vector."""
    na, nb = l2_norm(a), l2_norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(dot(a, b) / (na * nb), -1.0, 1.0))


class SoftmaxMLPClassifier(BaseEstimator, ClassifierMixin):
    """Estimator wrapper around the flat-parameter network.

    Trains with the same minibatch SGD the federated clients use, so a
    centrally trained model is directly comparable to a federated one.
    """

    def __init__(self, hidden_dims=(), epochs=20, learning_rate=0.1, batch_size=64, random_state=0):
        self.hidden_dims = hidden_dims
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.arch_ = Architecture(X.shape[1], max(len(self.classes_), 2), self.hidden_dims)
        init = init_params(self.arch_, self.random_state)
        cfg = TrainConfig(self.epochs, self.learning_rate, self.batch_size, self.random_state)
        self.params_ = init + local_train(init, self.arch_, LabeledDataset(X, y_idx), cfg)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        return softmax(forward(self.params_, self.arch_, X))[:, : len(self.classes_)]

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
