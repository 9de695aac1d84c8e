"""Post-validation filtering, clipping, aggregation and baseline aggregators."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array


@dataclass
class FilterOutcome:
    accepted_reps: List[int]
    accepted_clients: List[int]
    scores: np.ndarray
    projection: str = "minimum"


def project_scores(m_matrices: Sequence[np.ndarray], mode: str = "minimum") -> np.ndarray:
    """Average every representative's matrix over validators, then reduce the
    per-class means to a scalar (``minimum`` or ``mean`` over classes)."""
    if len(m_matrices) == 0:
        raise ValueError("no representative reports to rank")
    means = np.stack([np.asarray(M, dtype=float).mean(axis=0) for M in m_matrices])
    if mode == "minimum":
        return means.min(axis=1)
    if mode == "mean":
        return means.mean(axis=1)
    raise ValueError(f"unknown projection {mode!r}")


def accept_count(m: int, rule: str = "ceil") -> int:
    return math.ceil(m / 2) if rule == "ceil" else max(1, m // 2)


def rank_order(scores) -> np.ndarray:
    """Indices sorted by descending score, ties to the lower index."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(scores.size), -scores))


def rank_and_filter(m_matrices, members: Sequence[Sequence[int]], mode: str = "minimum",
                    rule: str = "ceil") -> FilterOutcome:
    """Keep the top half of representatives and resolve them to local updates.

    ``members[e]`` lists the local-update positions behind representative ``e``
    (the base alone for bijective representatives, the cluster otherwise).
    """
    scores = project_scores(m_matrices, mode)
    top = sorted(int(e) for e in rank_order(scores)[: accept_count(len(scores), rule)])
    clients = sorted({int(i) for e in top for i in members[e]})
    return FilterOutcome(top, clients, scores, mode)


def clip_updates(updates) -> np.ndarray:
    """Scale each update to at most the median L2 norm of the set."""
    U = np.asarray(updates, dtype=float)
    if U.size == 0:
        return U
    norms = np.linalg.norm(U, axis=1)
    bound = np.median(norms)
    factor = np.ones_like(norms)
    nz = norms > 0
    factor[nz] = np.minimum(1.0, bound / norms[nz])
    return U * factor[:, None]


def aggregate(global_params, updates) -> np.ndarray:
    U = np.asarray(updates, dtype=float)
    if U.size == 0:
        return np.array(global_params, dtype=float, copy=True)
    return np.asarray(global_params, dtype=float) + U.mean(axis=0)


def geometric_median(points, max_iter: int = 50, tol: float = 1e-8, eps: float = 1e-12) -> np.ndarray:
    """Weiszfeld iterations from the coordinate mean.

    Stops after ``max_iter`` steps or when the relative movement drops below
    ``tol``. Distances are floored at ``eps`` so an iterate sitting on a data
    point stays finite.
    """
    P = np.asarray(points, dtype=float)
    z = P.mean(axis=0)
    for _ in range(max_iter):
        d = np.maximum(np.linalg.norm(P - z, axis=1), eps)
        w = 1.0 / d
        new = (w[:, None] * P).sum(axis=0) / w.sum()
        moved = np.linalg.norm(new - z)
        z = new
        if moved <= tol * max(np.linalg.norm(z), eps):
            break
    return z


class GeometricMedian(BaseEstimator):
    """Robust location of a set of updates, exposed as ``location_`` after ``fit``."""

    def __init__(self, max_iter=50, tol=1e-8):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X)
        self.location_ = geometric_median(X, self.max_iter, self.tol)
        return self


BASELINES = ("fedavg", "fedoracle", "rfa")


def baseline_aggregate(method: str, global_params, updates, is_malicious) -> np.ndarray:
    U = np.asarray(updates, dtype=float)
    flags = np.asarray(is_malicious, dtype=bool)
    if method == "fedavg":
        return aggregate(global_params, U)
    if method == "fedoracle":
        return aggregate(global_params, U[~flags])
    if method == "rfa":
        return np.asarray(global_params, dtype=float) + geometric_median(U)
    raise ValueError(f"unknown baseline {method!r}")


def score_round(accepted_ids, participant_ids, malicious_ids):
    """``(TPR, TNR)`` in percent; either is NaN when its class is absent."""
    accepted = set(accepted_ids)
    malicious = set(malicious_ids)
    mal = [i for i in participant_ids if i in malicious]
    ben = [i for i in participant_ids if i not in malicious]
    tpr = 100.0 * sum(i not in accepted for i in mal) / len(mal) if mal else float("nan")
    tnr = 100.0 * sum(i in accepted for i in ben) / len(ben) if ben else float("nan")
    return tpr, tnr
