"""Datasets, synthetic blobs and federated partitioning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np


class DataError(ValueError):
    """Raised when a dataset cannot satisfy a partitioning request."""


@dataclass
class LabeledDataset:
    """Feature matrix plus integer labels.

    ``index`` carries the row ids of the source dataset so partitions can be
    checked for duplication; it defaults to ``arange(len)``.
    """

    features: np.ndarray
    labels: np.ndarray
    index: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1) if self.features.size else self.features.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=int).ravel()
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels have different row counts")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative")
        if self.index is None:
            self.index = np.arange(self.labels.size)
        self.index = np.asarray(self.index, dtype=int)

    def __len__(self):
        return int(self.labels.size)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.features[idx], self.labels[idx], self.index[idx])

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    @staticmethod
    def concat(parts) -> "LabeledDataset":
        parts = list(parts)
        return LabeledDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.index for p in parts]),
        )


def synth_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed,
    min_distance: float = 4.0,
    confusable: Optional[Tuple[int, int, float]] = None,
    means: Optional[np.ndarray] = None,
) -> Tuple[LabeledDataset, np.ndarray]:
    """Isotropic Gaussian clusters, one per class.

    Class means are at least ``min_distance`` apart, except for the optional
    ``confusable=(a, b, d)`` pair whose means are exactly ``d`` apart. Pass
    ``means`` to draw a fresh sample (e.g. a test set) from the same clusters.
    Returns the dataset and the ``(num_classes, dim)`` matrix of means.
    """
    if per_class < 1:
        raise DataError("per_class must be positive")
    rng = np.random.default_rng(seed)
    if means is None:
        means = _place_means(num_classes, dim, min_distance, confusable, rng)
    means = np.asarray(means, dtype=float)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(features[order], labels[order]), means


def _place_means(c, dim, min_distance, confusable, rng, max_tries=10_000):
    sigma = min_distance / math.sqrt(dim) * 1.25
    means = np.zeros((c, dim))
    placed: List[int] = []
    pair = {}
    if confusable is not None:
        a, b, d = confusable
        if a == b:
            raise DataError("confusable pair must name two classes")
        pair = {b: (a, d)}
    for k in ([confusable[0]] if confusable else []) + list(range(c)):
        if k in placed:
            continue
        if k in pair:
            a, d = pair[k]
            if a not in placed:
                raise DataError("confusable anchor must be placed first")
            u = rng.standard_normal(dim)
            means[k] = means[a] + d * u / np.linalg.norm(u)
            placed.append(k)
            continue
        for _ in range(max_tries):
            cand = sigma * rng.standard_normal(dim)
            if not placed or np.min(np.linalg.norm(means[placed] - cand, axis=1)) >= min_distance:
                means[k] = cand
                placed.append(k)
                break
        else:
            raise DataError("could not place class means at the requested separation")
    return means


def load_csv_dataset(path) -> LabeledDataset:
    """Read a headerless or headed CSV whose last column is the integer label."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = np.genfromtxt(path, delimiter=",", dtype=float)
    if np.isnan(raw[0]).all():
        raw = raw[1:]
    raw = np.atleast_2d(raw)
    return LabeledDataset(raw[:, :-1], raw[:, -1].astype(int))


# partitioning ---------------------------------------------------------------

def partition_iid(data: LabeledDataset, n: int, rng: np.random.Generator) -> List[LabeledDataset]:
    """Shuffle and cut into ``n`` equal disjoint shards (remainder dropped)."""
    if n < 1 or len(data) < n:
        raise DataError(f"cannot split {len(data)} samples into {n} shards")
    size = len(data) // n
    order = rng.permutation(len(data))
    return [data.subset(order[i * size:(i + 1) * size]) for i in range(n)]


def partition_one_class_expert(
    data: LabeledDataset,
    n: int,
    rng: np.random.Generator,
    num_classes: Optional[int] = None,
    samples_per_client: Optional[int] = None,
) -> List[LabeledDataset]:
    """Client ``i`` is an expert of class ``i % c``: half of its shard comes from
    that class, the other half uniformly from the remaining classes."""
    c = num_classes or int(data.labels.max()) + 1
    if n < 1:
        raise DataError("need at least one client")
    experts = np.arange(n) % c
    by_class = [rng.permutation(np.flatnonzero(data.labels == k)) for k in range(c)]
    size = samples_per_client if samples_per_client is not None else len(data) // n
    while size >= 2:
        shards = _one_class_expert_attempt(data, experts, by_class, size, rng)
        if shards is not None:
            return shards
        if samples_per_client is not None:
            break
        size -= 2
    raise DataError("insufficient class supply for a one-class-expert split")


def _one_class_expert_attempt(data, experts, by_class, size, rng):
    own = size // 2
    other = size - own
    used = np.zeros(len(data), dtype=bool)
    taken = [0] * len(by_class)
    own_idx = []
    for k in experts:
        pool = by_class[k]
        if taken[k] + own > pool.size:
            return None
        own_idx.append(pool[taken[k]:taken[k] + own])
        taken[k] += own
    for idx in own_idx:
        used[idx] = True
    shards = []
    for i, k in enumerate(experts):
        free = np.flatnonzero(~used & (data.labels != k))
        if free.size < other:
            return None
        pick = rng.choice(free, size=other, replace=False)
        used[pick] = True
        shards.append(data.subset(rng.permutation(np.concatenate([own_idx[i], pick]))))
    return shards


def partition_dirichlet(
    data: LabeledDataset,
    n: int,
    alpha: float,
    rng: np.random.Generator,
    min_size: int = 64,
    max_redraws: int = 100,
) -> List[LabeledDataset]:
    """Per-class Dirichlet(alpha) allocation of samples to clients.

    Allocations are redrawn until every client holds ``min_size`` samples; after
    ``max_redraws`` failures the floor relaxes to one sample.
    """
    if alpha <= 0:
        raise DataError("alpha must be positive")
    classes = np.unique(data.labels)
    for floor in (min_size, 1):
        for _ in range(max_redraws):
            parts = [[] for _ in range(n)]
            for k in classes:
                idx = rng.permutation(np.flatnonzero(data.labels == k))
                props = rng.dirichlet(np.full(n, alpha))
                cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
                for i, chunk in enumerate(np.split(idx, cuts)):
                    parts[i].append(chunk)
            sizes = [sum(p.size for p in part) for part in parts]
            if min(sizes) >= floor:
                return [data.subset(rng.permutation(np.concatenate(part))) for part in parts]
    raise DataError("Dirichlet partition left a client without samples")


def split_holdout(data: LabeledDataset, fraction: float, rng: np.random.Generator):
    """Stratified split into ``(train, validation)`` with ``ceil(fraction*|D|)``
    validation samples; per-class holdout counts are within one of the exact
    proportion (largest-remainder rounding)."""
    if not 0 <= fraction < 1:
        raise DataError("fraction must lie in [0, 1)")
    total = math.ceil(fraction * len(data))
    classes, counts = np.unique(data.labels, return_counts=True)
    exact = fraction * counts
    alloc = np.floor(exact).astype(int)
    remainder = total - alloc.sum()
    # ties resolved by class order for determinism
    order = np.lexsort((classes, -(exact - alloc)))
    alloc[order[:remainder]] += 1
    val_idx, train_idx = [], []
    for k, h in zip(classes, alloc):
        idx = rng.permutation(np.flatnonzero(data.labels == k))
        val_idx.append(idx[:h])
        train_idx.append(idx[h:])
    train = data.subset(rng.permutation(np.concatenate(train_idx)))
    val = data.subset(rng.permutation(np.concatenate(val_idx)))
    return train, val


def sample_participants(client_ids, m: int, rng: np.random.Generator) -> List[int]:
    """Uniform draw of ``m`` ids without replacement, in draw order."""
    client_ids = list(client_ids)
    if m > len(client_ids):
        raise DataError("cannot sample more participants than clients")
    return [client_ids[i] for i in rng.choice(len(client_ids), size=m, replace=False)]
