"""Representative models: similarity-weighted (bijective) and cluster-based."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state


@dataclass
class RepresentativeModel:
    params: np.ndarray
    update: np.ndarray
    contributions: Dict[int, float]
    members: List[int] = field(default_factory=list)
    base_id: Optional[int] = None


def similarity(w, u) -> float:
    """Rectified cosine similarity; zero for opposing directions or null vectors."""
    w, u = np.asarray(w, dtype=float), np.asarray(u, dtype=float)
    nw, nu = np.linalg.norm(w), np.linalg.norm(u)
    if nw == 0 or nu == 0:
        return 0.0
    return float(max(0.0, min(1.0, w @ u / (nw * nu))))


def similarity_matrix(updates: np.ndarray) -> np.ndarray:
    U = np.asarray(updates, dtype=float)
    norms = np.linalg.norm(U, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    cos = (U @ U.T) / np.outer(safe, safe)
    cos[norms == 0, :] = 0.0
    cos[:, norms == 0] = 0.0
    return np.clip(cos, 0.0, 1.0)


def sibling_weights(updates: np.ndarray) -> np.ndarray:
    """Unnormalised sibling weights ``s(w_i, u_j) * |w_i| / |u_j|`` with a zero diagonal.

    Null siblings get weight zero.
    """
    U = np.asarray(updates, dtype=float)
    norms = np.linalg.norm(U, axis=1)
    W = similarity_matrix(U) * norms[:, None]
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    W = W * inv[None, :]
    np.fill_diagonal(W, 0.0)
    return W


def bijective_generate(global_params, updates, tau: float = 0.75, client_ids=None) -> List[RepresentativeModel]:
    """One representative per local update.

    Each base update keeps weight ``1 - tau``; the remaining ``tau`` is a
    weighted average of the other updates, each weighted by its rectified
    cosine similarity to the base times ``|base| / |sibling|``. A base with no
    agreeing sibling degenerates to the local model itself. The update is
    exactly ``sum(contributions[j] * updates[j])``.
    """
    U = np.asarray(updates, dtype=float)
    n = U.shape[0]
    if n < 2:
        raise ValueError("bijective representatives need at least two updates")
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    ids = list(range(n)) if client_ids is None else list(client_ids)
    G = np.asarray(global_params, dtype=float)
    W = sibling_weights(U)
    totals = W.sum(axis=1)
    reps = []
    for i in range(n):
        contrib = {ids[i]: 1.0}
        update = U[i].copy()
        if totals[i] > 0 and tau > 0:
            share = W[i] / totals[i]
            update = (1 - tau) * U[i] + tau * (share @ U)
            contrib = {ids[j]: tau * share[j] for j in range(n) if share[j] > 0}
            contrib[ids[i]] = 1 - tau
        reps.append(RepresentativeModel(G + update, update, contrib, [i], base_id=ids[i]))
    return reps


class BijectiveRepresentatives(TransformerMixin, BaseEstimator):
    """Transformer mapping a stack of local updates to representative updates.

    ``fit`` records the sibling share matrix in ``mixing_`` (row ``i`` holds the
    contribution of every update to representative ``i``).
    """

    def __init__(self, tau=0.75):
        self.tau = tau

    def fit(self, X, y=None):
        X = check_array(X)
        reps = bijective_generate(np.zeros(X.shape[1]), X, self.tau)
        n = X.shape[0]
        self.mixing_ = np.zeros((n, n))
        for i, rep in enumerate(reps):
            for j, w in rep.contributions.items():
                self.mixing_[i, j] = w
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mixing_")
        X = check_array(X)
        return np.stack([r.update for r in bijective_generate(np.zeros(X.shape[1]), X, self.tau)])


# clustering -----------------------------------------------------------------

class ClusteringError(ValueError):
    pass


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            raise ClusteringError("k exceeds the number of distinct points")
        nxt = X[rng.choice(n, p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - nxt) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(X, k: int, rng=None, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeds; returns the assignment vector."""
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if k < 1 or k > len(np.unique(X, axis=0)):
        raise ClusteringError(f"cannot form {k} clusters from {len(np.unique(X, axis=0))} distinct points")
    centers = _kmeans_pp(X, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # reseed an empty cluster at the worst-fit point
                far = d2[np.arange(len(X)), labels].argmax()
                centers[j] = X[far]
                labels[far] = j
    return labels


def inertia(X, labels) -> float:
    X = np.asarray(X, dtype=float)
    return float(sum(((X[labels == j] - X[labels == j].mean(axis=0)) ** 2).sum() for j in np.unique(labels)))


def silhouette(X, labels) -> float:
    """Mean silhouette with Euclidean distance.

    Singleton members score 0, and so does every point whose intra- and
    nearest-cluster distances are both zero.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        return 0.0
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt((diff ** 2).sum(axis=2))
    scores = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in clusters if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def _assign(X, k, rng):
    try:
        return kmeans(X, k, rng)
    except ClusteringError:
        # fewer distinct points than clusters: spread duplicates round-robin
        return np.arange(len(X)) % k


def dynamic_clustering(X, k1: int, k2: int, rng):
    """Best K-means assignment over ``k`` in ``[k1, min(k2, n-1)]`` by silhouette;
    ties go to the smaller ``k``. Returns ``(labels, k, score)``."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k1 < 1 or k1 > n:
        raise ClusteringError("k1 must lie in [1, n]")
    upper = max(k1, min(k2, n - 1))
    best = None
    for k in range(k1, upper + 1):
        labels = _assign(X, k, rng)
        score = silhouette(X, labels)
        if best is None or score > best[2]:
            best = (labels, k, score)
    return best


def cluster_generate(global_params, updates, k1: int, k2: int, rng, client_ids=None):
    """One representative per cluster: ``G + mean(member updates)``.

    Returns ``(assignment, representatives)``.
    """
    U = np.asarray(updates, dtype=float)
    ids = list(range(len(U))) if client_ids is None else list(client_ids)
    G = np.asarray(global_params, dtype=float)
    labels, k, _ = dynamic_clustering(U, k1, k2, rng)
    reps = []
    for j in range(k):
        members = np.flatnonzero(labels == j)
        update = U[members].mean(axis=0)
        contrib = {ids[i]: 1.0 / len(members) for i in members}
        reps.append(RepresentativeModel(G + update, update, contrib, list(members)))
    return labels, reps


class DynamicKMeans(ClusterMixin, BaseEstimator):
    """K-means with the cluster count chosen by silhouette within ``[k_min, k_max]``."""

    def __init__(self, k_min=2, k_max=None, random_state=None):
        self.k_min = k_min
        self.k_max = k_max
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        k_max = self.k_max if self.k_max is not None else max(self.k_min, len(X) // 2)
        seed = check_random_state(self.random_state).randint(2**31 - 1)
        self.labels_, self.n_clusters_, self.silhouette_ = dynamic_clustering(
            X, self.k_min, k_max, np.random.default_rng(seed)
        )
        self.cluster_centers_ = np.stack([X[self.labels_ == j].mean(axis=0) for j in range(self.n_clusters_)])
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X)
        return ((X[:, None, :] - self.cluster_centers_[None]) ** 2).sum(axis=2).argmin(axis=1)
