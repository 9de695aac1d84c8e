"""Round metrics: main accuracy, source-class recall, attack success, backdoor accuracy, fidelity."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model_math as mm
from .attacks import TriggerSpec, apply_trigger
from .data import LabeledDataset


@dataclass(frozen=True)
class ModelMetrics:
    ma: float
    rcl: float
    asr: float
    ba: float


def metrics_from_predictions(pred, labels, source: int, target: int, triggered_pred=None,
                             triggered_labels=None, backdoor_class: Optional[int] = None) -> ModelMetrics:
    """All rates in percent. ``triggered_pred`` are predictions on the
    triggered copies of ``triggered_labels`` samples; BA counts only samples
    whose true label differs from ``backdoor_class``. Empty denominators give NaN."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    ma = 100.0 * np.mean(pred == labels) if labels.size else np.nan
    src = labels == source
    rcl = 100.0 * np.mean(pred[src] == source) if src.any() else np.nan
    asr = 100.0 * np.mean(pred[src] == target) if src.any() else np.nan
    ba = np.nan
    if triggered_pred is not None and backdoor_class is not None:
        tl = np.asarray(triggered_labels)
        mask = tl != backdoor_class
        if mask.any():
            ba = 100.0 * np.mean(np.asarray(triggered_pred)[mask] == backdoor_class)
    return ModelMetrics(float(ma), float(rcl), float(asr), float(ba))


def compute_metrics(params, arch, test: LabeledDataset, source: int, target: int,
                    trigger: Optional[TriggerSpec] = None) -> ModelMetrics:
    pred = mm.predict(params, arch, test.features)
    tpred = None
    if trigger is not None:
        tpred = mm.predict(params, arch, apply_trigger(test.features, trigger))
    return metrics_from_predictions(pred, test.labels, source, target, tpred, test.labels,
                                    None if trigger is None else trigger.target_class)


def fidelity_score(assignment, is_malicious) -> float:
    """Cluster-size-weighted share of the majority side (benign or malicious)."""
    a = np.asarray(assignment)
    flags = np.asarray(is_malicious, dtype=bool)
    if a.size == 0:
        return float("nan")
    total = 0
    for c in np.unique(a):
        members = flags[a == c]
        total += max(members.sum(), (~members).sum())
    return total / a.size
