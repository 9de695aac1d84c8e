"""Client-side poisoning: targeted label flipping, inner-product manipulation
and a distributed trigger backdoor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .data import LabeledDataset

ATTACKS = ("none", "tlfa", "ipma", "dba")
VALIDATOR_ATTACKS = ("none", "fa_adp", "fa_adv")


@dataclass(frozen=True)
class TriggerSpec:
    feature_indices: Tuple[int, ...]
    trigger_value: np.ndarray
    num_parts: int = 4
    target_class: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_indices", tuple(int(i) for i in self.feature_indices))
        value = np.broadcast_to(np.asarray(self.trigger_value, dtype=float),
                                (len(self.feature_indices),)).copy()
        object.__setattr__(self, "trigger_value", value)
        if self.num_parts < 1:
            raise ValueError("num_parts must be positive")
        if len(set(self.feature_indices)) != len(self.feature_indices):
            raise ValueError("trigger indices must be distinct")

    def part(self, j: int) -> "TriggerSpec":
        """Contiguous slice ``j`` of the trigger (``np.array_split`` order)."""
        chunks = np.array_split(np.arange(len(self.feature_indices)), self.num_parts)
        sel = chunks[j % self.num_parts]
        return TriggerSpec(tuple(self.feature_indices[i] for i in sel), self.trigger_value[sel], 1, self.target_class)

    def validate(self, input_dim: int):
        if any(i < 0 or i >= input_dim for i in self.feature_indices):
            raise ValueError("trigger index outside the feature range")


def default_trigger(features: np.ndarray, target_class: int, num_parts: int = 4) -> TriggerSpec:
    """First ``ceil(dim/8)`` features pinned to their dataset-wide maximum."""
    features = np.asarray(features, dtype=float)
    width = math.ceil(features.shape[1] / 8)
    idx = tuple(range(width))
    return TriggerSpec(idx, features[:, :width].max(axis=0), num_parts, target_class)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    source_class: int = 0
    target_class: int = 1
    epsilon: float = 1.0
    pspb: int = 20
    backdoor_class: int = 0
    num_parts: int = 4
    validator_attack: str = "none"
    active_rounds: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.validator_attack not in VALIDATOR_ATTACKS:
            raise ValueError(f"unknown validator attack {self.validator_attack!r}")
        if self.source_class == self.target_class:
            raise ValueError("source and target class must differ")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.pspb < 0:
            raise ValueError("pspb must be non-negative")

    def window(self, num_rounds: int) -> Tuple[int, int]:
        """Inclusive 1-based round interval in which attacks run."""
        if self.active_rounds is not None:
            return tuple(self.active_rounds)
        return (math.ceil(0.25 * num_rounds), num_rounds)

    def is_active(self, round_index: int, num_rounds: int) -> bool:
        lo, hi = self.window(num_rounds)
        return self.kind != "none" and lo <= round_index <= hi


def tlfa_poison(data: LabeledDataset, source: int, target: int) -> LabeledDataset:
    labels = data.labels.copy()
    labels[labels == source] = target
    return LabeledDataset(data.features.copy(), labels, data.index.copy())


def ipma_update(benign_updates: Sequence[np.ndarray], eps: float = 1.0) -> np.ndarray:
    B = np.asarray(benign_updates, dtype=float)
    if B.ndim != 2 or B.shape[0] == 0:
        raise ValueError("IPMA needs at least one benign update")
    return -eps * B.mean(axis=0)


def apply_trigger(x, part: TriggerSpec) -> np.ndarray:
    """Stamp ``part`` onto a feature row or batch (copy)."""
    x = np.array(x, dtype=float, copy=True)
    if part.feature_indices:
        x[..., list(part.feature_indices)] = part.trigger_value
    return x


def dba_poison_batch(x, y, part: TriggerSpec, pspb: int, target: int):
    """Stamp ``part`` and relabel the first ``min(pspb, len(batch))`` samples.

    The batch order is already shuffled by the trainer, so "first" is a
    uniform choice.
    """
    x = np.array(x, dtype=float, copy=True)
    y = np.array(y, copy=True)
    n = min(int(pspb), len(y))
    if n:
        x[:n] = apply_trigger(x[:n], part)
        y[:n] = target
    return x, y


def dba_batch_hook(part: TriggerSpec, pspb: int, target: int):
    def hook(x, y, rng):
        return dba_poison_batch(x, y, part, pspb, target)
    return hook
