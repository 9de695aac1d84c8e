"""Simulation configuration, TOML loading and the preset catalog."""
from __future__ import annotations

import copy
import dataclasses
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from types import MappingProxyType
from typing import Any, Dict, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .attacks import AttackConfig
from .model_math import TrainConfig
from .validation import ValidationConfig

DEFENSES = ("flshield_bijective", "flshield_cluster", "fedavg", "fedoracle", "rfa")
DISTRIBUTIONS = ("iid", "one_class_expert", "dirichlet")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 10
    input_dim: int = 32
    samples_per_client: int = 500
    test_per_class: int = 200
    spread: float = 1.0
    min_distance: float = 4.0
    # distance between the source and target class means; None keeps them apart
    confusable_distance: Optional[float] = 1.2
    distribution: str = "iid"
    dirichlet_alpha: float = 0.5
    holdout_fraction: float = 0.3
    csv_path: Optional[str] = None

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {self.distribution!r}")


@dataclass(frozen=True)
class DefenseConfig:
    tau: float = 0.75
    k1: int = 2
    k2: Optional[int] = None           # None: floor(updates / 2)
    projection: str = "minimum"
    accept_rule: str = "ceil"
    clip: bool = True
    aggregate_representatives: bool = False

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.projection not in ("minimum", "mean"):
            raise ConfigError(f"unknown projection {self.projection!r}")
        if self.accept_rule not in ("ceil", "floor"):
            raise ConfigError(f"unknown accept rule {self.accept_rule!r}")


@dataclass(frozen=True)
class SimConfig:
    num_clients: int = 20
    clients_per_round: int = 10
    num_rounds: int = 40
    malicious_fraction: float = 0.4
    seed: int = 0
    defense: str = "flshield_bijective"
    validator_pool: str = "all"          # or "participants"
    hidden_dims: Tuple[int, ...] = ()
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    filtering: DefenseConfig = field(default_factory=DefenseConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not 0 <= self.malicious_fraction < 0.5:
            raise ConfigError("malicious_fraction must lie in [0, 0.5)")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError("clients_per_round must lie in [1, num_clients]")
        if self.num_rounds < 0:
            raise ConfigError("num_rounds must be non-negative")
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}")
        if self.validator_pool not in ("all", "participants"):
            raise ConfigError(f"unknown validator pool {self.validator_pool!r}")
        if self.validation.num_validators > self.num_clients:
            raise ConfigError("more validators than clients")
        if self.attack.pspb > self.training.batch_size:
            raise ConfigError("pspb exceeds the batch size")
        c = self.data.num_classes
        for name in ("source_class", "target_class", "backdoor_class"):
            if not 0 <= getattr(self.attack, name) < c:
                raise ConfigError(f"attack.{name} outside [0, {c})")

    @property
    def contamination(self) -> float:
        if self.validation.contamination is not None:
            return self.validation.contamination
        return min(self.malicious_fraction + 0.05, 0.49)

    def with_overrides(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "data": DataConfig,
    "training": TrainConfig,
    "filtering": DefenseConfig,
    "validation": ValidationConfig,
    "attack": AttackConfig,
}


def _build(cls, values: Dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kw = dict(values)
    if cls is AttackConfig and kw.get("active_rounds") is not None:
        kw["active_rounds"] = tuple(kw["active_rounds"])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{where}]: {exc}") from exc


def config_from_dict(raw: Dict[str, Any], base: Optional[SimConfig] = None) -> SimConfig:
    """Overlay ``raw`` (TOML layout: top-level keys plus one table per section) on ``base``."""
    base = base or SimConfig()
    top = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            merged = {**dataclasses.asdict(getattr(base, key)), **value}
            top[key] = _build(_SECTIONS[key], merged, key)
        else:
            top[key] = value
    known = {f.name for f in fields(SimConfig)}
    unknown = set(top) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    try:
        return replace(base, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> SimConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open("rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    preset = raw.pop("preset", None)
    base = get_preset(preset) if preset else None
    return config_from_dict(raw, base)


# presets --------------------------------------------------------------------

PRESET_VERSION = "1"

# Label-flipping and inner-product scenarios train at a slower rate so the
# global model is still improving on every class during the attack window.
_SLOW = {"learning_rate": 0.01}

_PRESET_SPECS = {
    "benign_iid": {"data": {"confusable_distance": None}},
    "tlfa_iid": {
        "training": _SLOW,
        "attack": {"kind": "tlfa", "source_class": 0, "target_class": 1},
    },
    "ipma_iid": {"training": _SLOW, "attack": {"kind": "ipma", "epsilon": 1.0}},
    "dba_iid": {
        "data": {"confusable_distance": None},
        "attack": {"kind": "dba", "pspb": 20, "backdoor_class": 0},
    },
    # every client validates, so the malicious share of validators is the
    # configured fraction in every round rather than a hypergeometric draw
    "tlfa_fa_adv": {
        "training": _SLOW,
        "attack": {"kind": "tlfa", "validator_attack": "fa_adv"},
        "validation": {"num_validators": 20},
    },
    "tlfa_fa_adp": {
        "training": _SLOW,
        "attack": {"kind": "tlfa", "validator_attack": "fa_adp"},
        "validation": {"num_validators": 20},
    },
    "tlfa_one_class_expert": {
        "training": _SLOW,
        "data": {"distribution": "one_class_expert", "samples_per_client": 800},
        "attack": {"kind": "tlfa"},
    },
    "tlfa_dirichlet": {
        "training": _SLOW,
        "data": {"distribution": "dirichlet", "dirichlet_alpha": 0.5},
        "attack": {"kind": "tlfa"},
    },
}

PRESETS = MappingProxyType({name: MappingProxyType(spec) for name, spec in _PRESET_SPECS.items()})


def get_preset(name: str) -> SimConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return config_from_dict(copy.deepcopy(_PRESET_SPECS[name]))


def preset_id(name: str) -> str:
    return f"{name}@v{PRESET_VERSION}"
