"""Experiment drivers behind the ablations: PSPB sweep, non-IID report
consistency and the gradient-inversion privacy probe."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import model_math as mm
from .config import SimConfig
from .data import partition_iid, synth_blobs
from .inversion import InversionConfig, invert, reconstruction_error, update_direction
from .representative import bijective_generate
from .simulation import run_simulation


# PSPB sweep -----------------------------------------------------------------

@dataclass
class SweepPoint:
    pspb: int
    backdoor_accuracy: float
    malicious_score: float
    benign_score: float


def malicious_rep_score(result) -> float:
    """Mean ranking score of malicious representatives over attack-active rounds."""
    vals = [r.rep_scores[r.rep_is_malicious] for r in result.active_reports()
            if r.rep_scores is not None and r.rep_is_malicious.any()]
    return float(np.concatenate(vals).mean()) if vals else float("nan")


def benign_rep_score(result) -> float:
    vals = [r.rep_scores[~r.rep_is_malicious] for r in result.active_reports()
            if r.rep_scores is not None and (~r.rep_is_malicious).any()]
    return float(np.concatenate(vals).mean()) if vals else float("nan")


def pspb_sweep(cfg: SimConfig, values: Sequence[int], defense: Optional[str] = None) -> List[SweepPoint]:
    """Run the backdoor scenario once per PSPB value.

    Backdoor accuracy is taken at the final round; representative scores are
    only available under a validation defense.
    """
    points = []
    for v in values:
        c = replace(cfg, attack=replace(cfg.attack, pspb=int(v)), defense=defense or cfg.defense)
        res = run_simulation(c)
        points.append(SweepPoint(int(v), res.final("ba"), malicious_rep_score(res), benign_rep_score(res)))
    return points


def sweep_spearman(points: Sequence[SweepPoint]) -> float:
    x = [p.pspb for p in points]
    y = [p.malicious_score for p in points]
    return float(spearmanr(x, y).statistic)


# non-IID report consistency -------------------------------------------------

def _pair_distances(reports: np.ndarray, groups: np.ndarray):
    """RMS distance between every pair of flattened reports, split by whether
    the pair shares a group."""
    flat = reports.reshape(reports.shape[0], -1)
    intra, inter = [], []
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            d = float(np.sqrt(np.mean((flat[i] - flat[j]) ** 2)))
            (intra if groups[i] == groups[j] else inter).append(d)
    return intra, inter


def n_distance_ratio(cfg: SimConfig) -> Dict[str, float]:
    """Intra- over inter-group mean distance of honest validators' reports.

    Validators are grouped by their expert class (``id % classes``). Pairs
    are pooled over all rounds with a validation step.
    """
    res = run_simulation(cfg)
    c = cfg.data.num_classes
    intra, inter = [], []
    for r in res.reports:
        v = r.validation
        if v is None:
            continue
        ids = np.array(v.validator_ids)
        honest = ~np.isin(ids, res.malicious_ids)
        a, b = _pair_distances(v.imputed[honest], ids[honest] % c)
        intra += a
        inter += b
    mi, me = float(np.mean(intra)), float(np.mean(inter))
    return {"intra": mi, "inter": me, "ratio": mi / me, "pairs_intra": len(intra), "pairs_inter": len(inter)}


# privacy probe --------------------------------------------------------------

@dataclass
class ProbeResult:
    raw_mse: float
    representative_mse: float
    cluster_mse: float
    random_mse: float
    contributors: int
    cluster_size: int
    raw_objective: float
    representative_objective: float


def privacy_probe(seed: int, num_clients: int = 10, batch_size: int = 1, dim: int = 32,
                  num_classes: int = 10, tau: float = 0.75, cluster_size: int = 5,
                  inv: Optional[InversionConfig] = None, lr: float = 0.1) -> ProbeResult:
    """Invert one client's raw update, its bijective representative, the
    mean of ``cluster_size`` updates containing it, and a random vector.

    Every client takes one SGD step on ``batch_size`` samples from the same
    softmax-regression global model, so its update is ``-lr`` times its batch
    gradient. Errors are matched MSE against client 0's true batch.
    """
    inv = inv or InversionConfig(iterations=1000, batch_size=batch_size, seed=seed)
    inv = replace(inv, batch_size=batch_size)
    data, _ = synth_blobs(num_classes, dim, 40, 1.0, np.random.default_rng([seed, 1]))
    arch = mm.Architecture(dim, num_classes)
    G = mm.init_params(arch, np.random.default_rng([seed, 2]))
    shards = partition_iid(data, num_clients, np.random.default_rng([seed, 3]))
    batches = [s.subset(np.arange(batch_size)) for s in shards]
    U = np.stack([-lr * mm.gradient(G, arch, b.features, b.labels) for b in batches])
    target = batches[0]

    def attack(update, knows=True):
        r = invert(update_direction(update), G, arch, replace(inv, knows_labels=knows), labels=target.labels)
        return reconstruction_error(r.features, target.features), r.objective

    raw_mse, raw_obj = attack(U[0])
    rep = bijective_generate(G, U, tau)[0]
    rep_mse, rep_obj = attack(rep.update)
    cluster_mse, _ = attack(U[:cluster_size].mean(axis=0))
    noise = np.random.default_rng([seed, 4]).standard_normal(U.shape[1]) * np.linalg.norm(U[0]) / np.sqrt(U.shape[1])
    random_mse, _ = attack(noise)
    return ProbeResult(raw_mse, rep_mse, cluster_mse, random_mse, len(rep.contributions), cluster_size,
                       raw_obj, rep_obj)
