"""Round loop: local training, attacks, the validation defense and baselines.

Randomness is derived from ``SeedSequence((seed, stream, round, ...))`` keys,
so every draw depends only on the configuration and its place in the
schedule, never on how many draws happened before it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from . import model_math as mm
from .attacks import (
    TriggerSpec, default_trigger, dba_batch_hook, ipma_update, tlfa_poison,
)
from .config import SimConfig
from .data import (
    LabeledDataset, load_csv_dataset, partition_dirichlet, partition_iid,
    partition_one_class_expert, sample_participants, split_holdout, synth_blobs,
)
from .defense import aggregate, baseline_aggregate, clip_updates, rank_and_filter, score_round
from .metrics import compute_metrics, fidelity_score
from .representative import bijective_generate, cluster_generate
from .validation import ValidationError, ValidationResult, run_validation
from .validator_attacks import AttackerView, make_crafter

log = logging.getLogger(__name__)

# stream tags for seed derivation
_DATA, _PART, _MAL, _INIT, _SAMPLE, _TRAIN, _VALID, _CLUSTER, _VPICK = range(9)


def _rng(seed, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


@dataclass
class ClientState:
    id: int
    train_data: LabeledDataset
    validation_data: LabeledDataset
    is_malicious: bool = False
    poisoned_data: Optional[LabeledDataset] = None
    trigger_part: Optional[TriggerSpec] = None


@dataclass
class RoundReport:
    round: int
    ma: float
    rcl: float
    asr: float
    ba: float
    tpr: float
    tnr: float
    fidelity: float
    accepted_malicious: int
    filtered_validators: int
    attack_active: bool = False
    participants: List[int] = field(default_factory=list)
    malicious_participants: List[int] = field(default_factory=list)
    accepted: List[int] = field(default_factory=list)
    rep_scores: Optional[np.ndarray] = None
    rep_is_malicious: Optional[np.ndarray] = None
    accepted_reps: List[int] = field(default_factory=list)
    aborted: bool = False
    validation: Optional[ValidationResult] = field(default=None, repr=False)

    CSV_FIELDS = ("round", "ma", "rcl", "asr", "ba", "tpr", "tnr", "fidelity",
                  "accepted_malicious", "filtered_validators")

    def csv_row(self) -> Dict[str, object]:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}

    @property
    def accepted_malicious_reps(self) -> int:
        if self.rep_is_malicious is None:
            return 0
        return int(sum(bool(self.rep_is_malicious[e]) for e in self.accepted_reps))


@dataclass
class SimulationState:
    cfg: SimConfig
    arch: mm.Architecture
    clients: List[ClientState]
    test: LabeledDataset
    global_params: np.ndarray
    trigger: Optional[TriggerSpec] = None
    round_index: int = 0

    @property
    def malicious_ids(self) -> List[int]:
        return [c.id for c in self.clients if c.is_malicious]


@dataclass
class SimulationResult:
    config: SimConfig
    reports: List[RoundReport]
    initial_params: np.ndarray
    final_params: np.ndarray
    malicious_ids: List[int] = field(default_factory=list)

    def active_reports(self) -> List[RoundReport]:
        return [r for r in self.reports if r.attack_active]

    def mean(self, metric: str, active_only: bool = True) -> float:
        rows = self.active_reports() if active_only else self.reports
        vals = np.array([getattr(r, metric) for r in rows], dtype=float)
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    def final(self, metric: str) -> float:
        return float(getattr(self.reports[-1], metric)) if self.reports else float("nan")


# setup ----------------------------------------------------------------------

def _source_data(cfg: SimConfig):
    d = cfg.data
    if d.csv_path:
        full = load_csv_dataset(d.csv_path)
        # a stratified 20% of the file serves as the global test set
        return split_holdout(full, 0.2, _rng(cfg.seed, _DATA))
    c = d.num_classes
    per_class = math.ceil(cfg.num_clients * d.samples_per_client / c)
    if d.distribution != "iid":
        # skewed splits draw unevenly from classes; leave slack in the pool
        per_class = math.ceil(1.25 * per_class)
    confusable = None
    if d.confusable_distance is not None:
        confusable = (cfg.attack.source_class, cfg.attack.target_class, d.confusable_distance)
    pool, means = synth_blobs(c, d.input_dim, per_class, d.spread, _rng(cfg.seed, _DATA),
                              d.min_distance, confusable)
    test, _ = synth_blobs(c, d.input_dim, d.test_per_class, d.spread, _rng(cfg.seed, _DATA, 1), means=means)
    return pool, test


def _partition(cfg: SimConfig, pool: LabeledDataset):
    d = cfg.data
    rng = _rng(cfg.seed, _PART)
    n = cfg.num_clients
    if d.distribution == "iid":
        shards = partition_iid(pool, n, rng)
        return [s.subset(np.arange(min(len(s), d.samples_per_client))) for s in shards]
    if d.distribution == "one_class_expert":
        return partition_one_class_expert(pool, n, rng, d.num_classes, d.samples_per_client)
    return partition_dirichlet(pool, n, d.dirichlet_alpha, rng, min_size=cfg.training.batch_size)


def setup(cfg: SimConfig) -> SimulationState:
    pool, test = _source_data(cfg)
    num_classes = max(cfg.data.num_classes, int(pool.labels.max()) + 1)
    arch = mm.Architecture(pool.features.shape[1], num_classes, cfg.hidden_dims)
    shards = _partition(cfg, pool)
    n_mal = int(math.floor(cfg.malicious_fraction * cfg.num_clients))
    mal = set(_rng(cfg.seed, _MAL).choice(cfg.num_clients, size=n_mal, replace=False).tolist())
    clients = []
    for i, shard in enumerate(shards):
        train, val = split_holdout(shard, cfg.data.holdout_fraction, _rng(cfg.seed, _PART, i + 1))
        clients.append(ClientState(i, train, val, i in mal))

    trigger = None
    atk = cfg.attack
    if atk.kind == "dba":
        trigger = default_trigger(pool.features, atk.backdoor_class, atk.num_parts)
    for rank, cid in enumerate(sorted(mal)):
        c = clients[cid]
        if atk.kind == "tlfa":
            c.poisoned_data = tlfa_poison(c.train_data, atk.source_class, atk.target_class)
        elif atk.kind == "dba":
            c.trigger_part = trigger.part(rank)
    # Malicious identities could be refreshed every round to model churning
    # Sybils; no defense here keeps per-client history, so ids stay fixed.
    return SimulationState(cfg, arch, clients, test, mm.init_params(arch, _rng(cfg.seed, _INIT)), trigger)


# one round ------------------------------------------------------------------

def _train_cfg(cfg: SimConfig, t: int, cid: int) -> mm.TrainConfig:
    seed = int(np.random.SeedSequence([cfg.seed, _TRAIN, t, cid]).generate_state(1, np.uint64)[0])
    return replace(cfg.training, seed=seed)


def local_updates(state: SimulationState, t: int, participants: List[int], active: bool) -> np.ndarray:
    cfg, atk = state.cfg, state.cfg.attack
    G = state.global_params
    updates = {}
    pending_ipma = []
    for cid in participants:
        c = state.clients[cid]
        tcfg = _train_cfg(cfg, t, cid)
        if c.is_malicious and active:
            if atk.kind == "tlfa":
                updates[cid] = mm.local_train(G, state.arch, c.poisoned_data, tcfg)
                continue
            if atk.kind == "dba":
                hook = dba_batch_hook(c.trigger_part, atk.pspb, atk.backdoor_class)
                updates[cid] = mm.local_train(G, state.arch, c.train_data, tcfg, batch_hook=hook)
                continue
            if atk.kind == "ipma":
                pending_ipma.append(cid)
                continue
        updates[cid] = mm.local_train(G, state.arch, c.train_data, tcfg)
    if pending_ipma:
        benign = [updates[cid] for cid in participants if cid not in pending_ipma]
        crafted = ipma_update(benign, atk.epsilon) if benign else np.zeros_like(G)
        for cid in pending_ipma:
            updates[cid] = crafted.copy()
    return np.stack([updates[cid] for cid in participants])


def _validators(state: SimulationState, t: int, participants: List[int]):
    cfg = state.cfg
    pool = participants if cfg.validator_pool == "participants" else [c.id for c in state.clients]
    k = min(cfg.validation.num_validators, len(pool))
    picked = sorted(sample_participants(pool, k, _rng(cfg.seed, _VPICK, t)))
    return [state.clients[i] for i in picked]


def run_round(state: SimulationState, t: int) -> RoundReport:
    """Execute round ``t`` (1-based), update ``state.global_params`` in place
    and return the round's report."""
    cfg = state.cfg
    atk = cfg.attack
    active = atk.is_active(t, cfg.num_rounds)
    ids = [c.id for c in state.clients]
    participants = sorted(sample_participants(ids, cfg.clients_per_round, _rng(cfg.seed, _SAMPLE, t)))
    flags = np.array([state.clients[i].is_malicious for i in participants])
    mal_ids = [i for i in participants if state.clients[i].is_malicious] if active else []
    U = local_updates(state, t, participants, active)
    G = state.global_params

    fidelity = float("nan")
    filtered = 0
    rep_scores = rep_mal = None
    accepted_reps: List[int] = []
    aborted = False
    vres = None

    if cfg.defense in ("fedavg", "fedoracle", "rfa"):
        is_mal = flags & active
        new_G = baseline_aggregate(cfg.defense, G, U, is_mal)
        if cfg.defense == "fedoracle":
            accepted = [p for p, m in zip(participants, is_mal) if not m]
        elif cfg.defense == "fedavg":
            accepted = list(participants)
        else:
            accepted = None
    else:
        f = cfg.filtering
        if cfg.defense == "flshield_bijective":
            reps = bijective_generate(G, U, f.tau)
            rep_mal = flags[[r.members[0] for r in reps]] & active
        else:
            k2 = f.k2 if f.k2 is not None else len(U) // 2
            assignment, reps = cluster_generate(G, U, f.k1, k2, _rng(cfg.seed, _CLUSTER, t))
            rep_mal = np.array([flags[r.members].mean() > 0.5 for r in reps]) & active
            fidelity = fidelity_score(assignment, flags & active)
        validators = _validators(state, t, participants)
        craft = None
        if active and atk.validator_attack != "none":
            view = AttackerView(rep_mal, cfg.validation.outlier, cfg.contamination, f.accept_rule)
            craft = make_crafter(atk.validator_attack, view)
        vcfg = replace(cfg.validation, contamination=cfg.contamination)
        try:
            vres = run_validation(G, [r.params for r in reps], state.arch, validators, vcfg,
                                  np.random.SeedSequence([cfg.seed, _VALID, t]), craft)
        except ValidationError as exc:
            log.error("round %d aborted: %s", t, exc)
            aborted = True
            vres = None
        if aborted:
            new_G = G.copy()
            accepted = []
        else:
            filtered = vres.filtered_count
            outcome = rank_and_filter(vres.m_matrices, [r.members for r in reps], f.projection, f.accept_rule)
            rep_scores, accepted_reps = outcome.scores, outcome.accepted_reps
            accepted = [participants[i] for i in outcome.accepted_clients]
            if f.aggregate_representatives:
                chosen = np.stack([reps[e].update for e in outcome.accepted_reps])
            else:
                chosen = U[outcome.accepted_clients]
            new_G = aggregate(G, clip_updates(chosen) if f.clip else chosen)

    if accepted is None:
        tpr = tnr = float("nan")
        acc_mal = 0
    else:
        tpr, tnr = score_round(accepted, participants, mal_ids)
        acc_mal = sum(1 for i in accepted if i in set(mal_ids))

    state.global_params = new_G
    state.round_index = t
    m = compute_metrics(new_G, state.arch, state.test, atk.source_class, atk.target_class, state.trigger)
    log.info("round %d: ma=%.2f rcl=%.2f ba=%.2f tpr=%.1f tnr=%.1f", t, m.ma, m.rcl, m.ba, tpr, tnr)
    return RoundReport(t, m.ma, m.rcl, m.asr, m.ba, tpr, tnr, fidelity, acc_mal, filtered, active,
                       participants, mal_ids, accepted or [], rep_scores, rep_mal, accepted_reps, aborted,
                       vres)


def run_simulation(cfg: SimConfig, callback=None) -> SimulationResult:
    state = setup(cfg)
    initial = state.global_params.copy()
    reports = []
    for t in range(1, cfg.num_rounds + 1):
        report = run_round(state, t)
        reports.append(report)
        if callback is not None:
            callback(report)
    return SimulationResult(cfg, reports, initial, state.global_params.copy(), state.malicious_ids)
