"""Per-class loss-impact validation of representative models.

A validator scores a candidate model against the current global model on its
own held-out data, one cell per class:

    L[i] = mean loss of G on class i  -  mean loss of candidate on class i

Positive cells mean the candidate improved that class. A validator reports one
such vector per representative; stacked per validator this is its report
matrix (representatives x classes), stacked per representative it is the
representative's matrix (validators x classes). Both are views of one
``(validators, representatives, classes)`` tensor here.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.stats import median_abs_deviation
from sklearn.base import BaseEstimator, OutlierMixin, TransformerMixin
from sklearn.covariance import ledoit_wolf_shrinkage
from sklearn.utils.validation import check_array, check_is_fitted

from . import model_math as mm
from .data import LabeledDataset

log = logging.getLogger(__name__)

IMPUTATION_METHODS = ("iterative", "mean", "median")
OUTLIER_METHODS = ("robust_mahalanobis", "mad_zscore", "none")


class ValidationError(RuntimeError):
    """Raised when no validator report survives filtering."""


@dataclass(frozen=True)
class ValidationConfig:
    n1: int = 10
    n2: int = 30
    num_validators: int = 10
    imputation: str = "iterative"
    outlier: str = "robust_mahalanobis"
    contamination: Optional[float] = None   # None: malicious fraction + 0.05
    metric: str = "lipc"

    def __post_init__(self):
        if self.n1 > self.n2 or self.n1 < 1:
            raise ValueError("need 1 <= n1 <= n2")
        if self.num_validators < 2:
            raise ValueError("need at least two validators")
        if self.imputation not in IMPUTATION_METHODS:
            raise ValueError(f"unknown imputation {self.imputation!r}")
        if self.outlier not in OUTLIER_METHODS:
            raise ValueError(f"unknown outlier method {self.outlier!r}")
        if self.contamination is not None and not 0 <= self.contamination < 0.5:
            raise ValueError("contamination must lie in [0, 0.5)")
        if self.metric not in ("lipc", "adpc"):
            raise ValueError(f"unknown metric {self.metric!r}")


def class_subsample(labels, num_classes: int, n1: int, n2: int, rng) -> List[Optional[np.ndarray]]:
    """Per class, up to ``n2`` sample indices drawn without replacement, or
    ``None`` when fewer than ``n1`` samples exist."""
    out = []
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size < n1:
            out.append(None)
        else:
            out.append(np.sort(rng.choice(idx, size=min(n2, idx.size), replace=False)))
    return out


def lipc_from_losses(global_losses, rep_losses, picks) -> np.ndarray:
    vec = np.full(len(picks), np.nan)
    for k, idx in enumerate(picks):
        if idx is not None:
            vec[k] = global_losses[idx].mean() - rep_losses[idx].mean()
    return vec


def compute_lipc(rep_params, global_params, arch, val_data: LabeledDataset, n1=10, n2=30, rng=None) -> np.ndarray:
    """Loss impact per class of ``rep_params`` relative to ``global_params``.

    Missing cells (fewer than ``n1`` samples of the class) are NaN.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    picks = class_subsample(val_data.labels, arch.num_classes, n1, n2, rng)
    g = mm.per_sample_loss(mm.forward(global_params, arch, val_data.features), val_data.labels)
    r = mm.per_sample_loss(mm.forward(rep_params, arch, val_data.features), val_data.labels)
    return lipc_from_losses(g, r, picks)


def compute_adpc(rep_params, global_params, arch, val_data: LabeledDataset) -> np.ndarray:
    """Per-class accuracy of the representative minus that of the global model
    (NaN for classes absent from ``val_data``)."""
    out = np.full(arch.num_classes, np.nan)
    rep_pred = mm.predict(rep_params, arch, val_data.features)
    g_pred = mm.predict(global_params, arch, val_data.features)
    for k in range(arch.num_classes):
        mask = val_data.labels == k
        if mask.any():
            out[k] = np.mean(rep_pred[mask] == k) - np.mean(g_pred[mask] == k)
    return out


# imputation -----------------------------------------------------------------

def impute(X, method: str = "iterative", sweeps: int = 10, ridge: float = 1e-3) -> np.ndarray:
    """Fill NaN cells column-wise (rows are validators, columns are report cells).

    ``iterative`` starts from the column means and then, for ``sweeps`` rounds,
    regresses every incomplete column on all the others (ridge on standardised
    columns) and overwrites its missing cells with the prediction. Columns with
    no observation at all are filled with 0.
    """
    X = np.array(X, dtype=float, copy=True)
    if X.ndim != 2:
        raise ValueError("impute expects a 2-D matrix")
    missing = np.isnan(X)
    if not missing.any():
        return X
    observed_any = ~missing.all(axis=0)
    if method == "median":
        fill = np.where(observed_any, np.nanmedian(np.where(observed_any, X, 0.0), axis=0), 0.0)
    else:
        fill = np.where(observed_any, np.nanmean(np.where(observed_any, X, 0.0), axis=0), 0.0)
    X[missing] = np.take(fill, np.nonzero(missing)[1])
    if method in ("mean", "median"):
        return X
    if method != "iterative":
        raise ValueError(f"unknown imputation method {method!r}")

    targets = [j for j in range(X.shape[1]) if missing[:, j].any() and observed_any[j] and (~missing[:, j]).sum() >= 2]
    for _ in range(sweeps):
        for j in targets:
            obs = ~missing[:, j]
            others = np.delete(X, j, axis=1)
            mu, sd = others[obs].mean(axis=0), others[obs].std(axis=0)
            sd[sd == 0] = 1.0
            A = (others - mu) / sd
            y = X[obs, j]
            y_mu = y.mean()
            Ao = A[obs]
            # dual ridge form: cheap when there are far fewer rows than columns
            alpha = np.linalg.solve(Ao @ Ao.T + ridge * np.eye(Ao.shape[0]), y - y_mu)
            X[~obs, j] = y_mu + A[~obs] @ (Ao.T @ alpha)
    return X


class ReportImputer(TransformerMixin, BaseEstimator):
    """Estimator facade over :func:`impute` (stateless; ``fit`` only validates)."""

    def __init__(self, method="iterative", sweeps=10, ridge=1e-3):
        self.method = method
        self.sweeps = sweeps
        self.ridge = ridge

    def fit(self, X, y=None):
        X = check_array(X, ensure_all_finite="allow-nan")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, ensure_all_finite="allow-nan")
        return impute(X, self.method, self.sweeps, self.ridge)


# outlier detection ----------------------------------------------------------

def _robust_cutoff(t, z=3.5):
    med = np.median(t)
    spread = median_abs_deviation(t, scale="normal")
    if spread == 0:
        spread = 1.253314 * np.abs(t - med).mean()
    return med + z * spread


def _core_distance(Z, row, contamination):
    """Distance of ``Z[row]`` under a location/shrinkage covariance fitted to
    the central rows of the remaining ones."""
    rest = np.delete(Z, row, axis=0)
    k, d = rest.shape
    h = max(k - int(math.floor(contamination * k)), k // 2 + 1)
    core = np.argsort((rest ** 2).sum(axis=1), kind="stable")[:h]
    mu = rest[core].mean(axis=0)
    C = rest[core] - mu
    S = C.T @ C / max(h - 1, 1)
    trace = np.trace(S)
    if trace <= 0:
        cov = np.eye(d)
    else:
        rho = ledoit_wolf_shrinkage(C, assume_centered=True) if h > 1 else 1.0
        cov = (1 - rho) * S + rho * trace / d * np.eye(d)
    r = Z[row] - mu
    return float(np.sqrt(max(r @ np.linalg.lstsq(cov, r, rcond=None)[0], 0.0)))


def robust_distances(X, contamination: float) -> np.ndarray:
    """Mahalanobis distances under a median-centred, shrinkage-regularised
    covariance fitted to the central ``1 - contamination`` share of rows.

    Each row is scored against a fit that leaves it out. Otherwise rows in
    the fitted core get in-sample distances and every other row looks far
    by comparison, which flags honest reports when there are fewer reports
    than report cells. Cells are not rescaled one by one: many report cells
    are nearly constant, and dividing by their tiny spread lets noise in
    those cells swamp a large shift in an informative one.
    """
    X = np.asarray(X, dtype=float)
    Z = X - np.median(X, axis=0)
    return np.array([_core_distance(Z, i, contamination) for i in range(X.shape[0])])


def detect_outliers(X, method: str = "robust_mahalanobis", contamination: float = 0.45) -> np.ndarray:
    """Boolean keep-mask over rows of ``X`` (one flattened report per row).

    ``robust_mahalanobis`` flags rows whose robust distance exceeds the median
    distance by more than 3.5 robust standard deviations, and never flags more
    than ``floor(contamination * k)`` rows (the farthest ones win).
    ``mad_zscore`` flags a row if any coordinate's modified z-score exceeds 3.5.
    """
    X = np.asarray(X, dtype=float)
    k = X.shape[0]
    keep = np.ones(k, dtype=bool)
    if method == "none":
        return keep
    if k < 3:
        log.warning("outlier detection disabled: only %d validators", k)
        return keep
    if method == "robust_mahalanobis":
        dist = robust_distances(X, contamination)
        cutoff = _robust_cutoff(dist)
        flagged = np.flatnonzero(dist > cutoff + 1e-12 * max(1.0, abs(cutoff)))
        cap = int(math.floor(contamination * k))
        if flagged.size > cap:
            flagged = flagged[np.argsort(-dist[flagged], kind="stable")[:cap]]
        keep[flagged] = False
        return keep
    if method == "mad_zscore":
        center = np.median(X, axis=0)
        dev = np.abs(X - center)
        scale = np.median(dev, axis=0) / 0.6745
        scale = np.where(scale > 0, scale, 1.253314 * dev.mean(axis=0))
        # nearly constant cells would turn rounding noise into huge scores
        floor = np.median(scale)
        scale = np.maximum(scale, floor)
        z = np.divide(X - center, scale, out=np.zeros_like(X), where=scale > 0)
        keep[np.abs(z).max(axis=1) > 3.5] = False
        return keep
    raise ValueError(f"unknown outlier method {method!r}")


class ReportOutlierDetector(OutlierMixin, BaseEstimator):
    """``fit_predict`` returns +1 for kept reports and -1 for flagged ones."""

    def __init__(self, method="robust_mahalanobis", contamination=0.45):
        self.method = method
        self.contamination = contamination

    def fit(self, X, y=None):
        X = check_array(X)
        self.keep_ = detect_outliers(X, self.method, self.contamination)
        self.n_features_in_ = X.shape[1]
        return self

    def fit_predict(self, X, y=None):
        return np.where(self.fit(X).keep_, 1, -1)


# protocol -------------------------------------------------------------------

@dataclass
class ValidationResult:
    validator_ids: List[int]
    raw_reports: np.ndarray       # (validators, reps, classes), NaN = missing
    submitted: np.ndarray         # after validator attacks, still with NaN
    imputed: np.ndarray           # (validators, reps, classes)
    keep: np.ndarray              # bool per validator

    @property
    def m_matrices(self) -> List[np.ndarray]:
        """One ``(kept validators, classes)`` matrix per representative."""
        kept = self.imputed[self.keep]
        return [kept[:, e, :] for e in range(kept.shape[1])]

    @property
    def filtered_count(self) -> int:
        return int((~self.keep).sum())


def validator_reports(rep_params: Sequence[np.ndarray], global_params, arch, val_data: LabeledDataset,
                      cfg: ValidationConfig, rng) -> np.ndarray:
    """A single validator's ``(reps, classes)`` report matrix.

    The per-class subsample is drawn once and shared by every representative.
    """
    picks = class_subsample(val_data.labels, arch.num_classes, cfg.n1, cfg.n2, rng)
    if cfg.metric == "adpc":
        return np.stack([compute_adpc(p, global_params, arch, val_data) for p in rep_params])
    g = mm.per_sample_loss(mm.forward(global_params, arch, val_data.features), val_data.labels)
    out = np.empty((len(rep_params), arch.num_classes))
    for e, p in enumerate(rep_params):
        r = mm.per_sample_loss(mm.forward(p, arch, val_data.features), val_data.labels)
        out[e] = lipc_from_losses(g, r, picks)
    return out


def run_validation(
    global_params,
    rep_params: Sequence[np.ndarray],
    arch,
    validators: Sequence,
    cfg: ValidationConfig,
    seed_seq: np.random.SeedSequence,
    craft: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
) -> ValidationResult:
    """Collect, impute and filter the reports of ``validators``.

    ``validators`` are objects with ``id``, ``validation_data`` and
    ``is_malicious``. ``craft(truthful, malicious_mask)`` may rewrite the
    malicious validators' rows of the report tensor before submission.
    """
    children = seed_seq.spawn(len(validators))
    raw = np.stack([
        validator_reports(rep_params, global_params, arch, v.validation_data, cfg, np.random.default_rng(s))
        for v, s in zip(validators, children)
    ])
    mal = np.array([bool(v.is_malicious) for v in validators])
    submitted = raw.copy()
    if craft is not None and mal.any():
        submitted = craft(raw, mal)
    k, m, c = submitted.shape
    flat = impute(submitted.reshape(k, m * c), cfg.imputation)
    contamination = 0.45 if cfg.contamination is None else cfg.contamination
    keep = detect_outliers(flat, cfg.outlier, contamination)
    if not keep.any():
        raise ValidationError("every validator report was filtered")
    return ValidationResult([v.id for v in validators], raw, submitted, flat.reshape(k, m, c), keep)
