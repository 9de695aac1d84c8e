"""End-to-end acceptance checks on the synthetic desk scenarios.

Every check records one PASS/FAIL line (shown in the terminal summary) before
asserting, so a red criterion still reports its measured numbers. Tolerances
are fixed here and nowhere else.
"""
import os
import subprocess
import sys
import time
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from fedshield import get_preset, run_simulation
from fedshield import model_math as mm
from fedshield.defense import rank_and_filter
from fedshield.experiments import n_distance_ratio, privacy_probe, pspb_sweep, sweep_spearman
from fedshield.representative import bijective_generate

from oracles import bijective_reference, rerank_reference

SEEDS = range(5)
FLSHIELD = ("flshield_bijective", "flshield_cluster")

# tolerances
ORACLE_RTOL = 1e-10
FD_RTOL = 1e-4
TPR_MIN, TNR_MIN = 95.0, 80.0
RCL_GAP_MAX, FEDAVG_RCL_GAP_MIN = 5.0, 20.0
IPMA_FEDAVG_MA_MAX, IPMA_GAP_MAX = 30.0, 3.0
DBA_FEDAVG_BA_MIN, DBA_DEFENDED_BA_MAX, SPEARMAN_MAX = 60.0, 10.0, -0.8
PSPB_VALUES = (2, 5, 10, 20, 32)
VA_ACCEPTED_MAX, VA_TPR_MIN, NO_DETECTOR_TPR_MAX = 5.0, 90.0, 50.0
RATIO_RANGE = (0.75, 1.25)
PRIVACY_FACTOR, MIN_CONTRIBUTORS = 3.0, 5
SUITE_BUDGET_S = 15 * 60


@lru_cache(maxsize=None)
def sim(preset, defense, seed, **over):
    cfg = get_preset(preset)
    kw = {"defense": defense, "seed": seed}
    if "projection" in over:
        kw["filtering"] = replace(cfg.filtering, projection=over.pop("projection"))
    if "outlier" in over:
        kw["validation"] = replace(cfg.validation, outlier=over.pop("outlier"))
    return run_simulation(cfg.with_overrides(**kw, **over))


def seed_mean(fn, preset, defense, **over):
    return float(np.nanmean([fn(sim(preset, defense, s, **over)) for s in SEEDS]))


def final(metric):
    return lambda r: r.final(metric)


def active_mean(metric):
    return lambda r: r.mean(metric)


def accepted_malicious_rep_pct(r):
    acc = sum(x.accepted_malicious_reps for x in r.active_reports())
    tot = sum(int(x.rep_is_malicious.sum()) for x in r.active_reports() if x.rep_is_malicious is not None)
    return 100.0 * acc / tot if tot else float("nan")


# C1 --------------------------------------------------------------------------

def test_c1_equation_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240101)
    worst_bij = 0.0
    for _ in range(1000):
        n, d = rng.integers(2, 9), rng.integers(1, 7)
        G, U, tau = rng.normal(size=d), rng.normal(size=(n, d)), rng.uniform(0.01, 0.99)
        got = np.array([r.params for r in bijective_generate(G, U, tau)])
        ref = np.array(bijective_reference(G.tolist(), U.tolist(), tau))
        worst_bij = max(worst_bij, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))))
    rerank_ok = 0
    for _ in range(1000):
        m, k, c = rng.integers(1, 12), rng.integers(1, 6), rng.integers(1, 5)
        M = [rng.normal(size=(k, c)) for _ in range(m)]
        if rng.random() < 0.3:
            M = [np.round(X) for X in M]
        members = [[e] for e in range(m)]
        mode = ("minimum", "mean")[int(rng.integers(2))]
        out = rank_and_filter(M, members, mode)
        reps, clients, scores = rerank_reference([X.tolist() for X in M], members, mode)
        rerank_ok += out.accepted_reps == reps and out.accepted_clients == clients and np.allclose(out.scores, scores)
    # central differences on a small MLP away from ReLU kinks
    arch = mm.Architecture(4, 3, (5,))
    worst_fd = 0.0
    for s in range(20):
        r = np.random.default_rng(s)
        p, x, y = mm.init_params(arch, s), r.normal(size=(6, 4)), r.integers(0, 3, 6)
        g = mm.gradient(p, arch, x, y)
        h = 1e-6
        fd = np.array([(mm.loss(p + h * e, arch, x, y) - mm.loss(p - h * e, arch, x, y)) / (2 * h)
                       for e in np.eye(p.size)])
        big = np.abs(fd) > 1e-6
        worst_fd = max(worst_fd, float(np.max(np.abs(g[big] - fd[big]) / np.abs(fd[big]))))
    elapsed = time.perf_counter() - t0
    ok = worst_bij <= ORACLE_RTOL and rerank_ok == 1000 and worst_fd <= FD_RTOL and elapsed < 60
    criterion("C1", ok, f"bijective max rel err {worst_bij:.2e}, reranker {rerank_ok}/1000, "
                        f"gradient max rel err {worst_fd:.2e}, {elapsed:.1f}s")
    assert ok


# C2 --------------------------------------------------------------------------

@pytest.mark.slow
def test_c2_tlfa_defense(criterion):
    oracle = seed_mean(final("rcl"), "tlfa_iid", "fedoracle")
    fedavg = seed_mean(final("rcl"), "tlfa_iid", "fedavg")
    parts, ok = [f"FedOracle RCL {oracle:.1f}, FedAvg RCL {fedavg:.1f}"], oracle - fedavg >= FEDAVG_RCL_GAP_MIN
    for d in FLSHIELD:
        tpr = seed_mean(active_mean("tpr"), "tlfa_iid", d)
        tnr = seed_mean(active_mean("tnr"), "tlfa_iid", d)
        rcl = seed_mean(final("rcl"), "tlfa_iid", d)
        ok &= tpr >= TPR_MIN and tnr >= TNR_MIN and abs(rcl - oracle) <= RCL_GAP_MAX
        parts.append(f"{d.split('_')[1]} TPR {tpr:.1f} TNR {tnr:.1f} RCL {rcl:.1f}")
    criterion("C2", ok, "; ".join(parts))
    assert ok


# C3 --------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="FedAvg keeps MA above 30% under IPMA on the blob task; "
                                       "see the decisions ledger")
def test_c3_ipma(criterion):
    oracle = seed_mean(final("ma"), "ipma_iid", "fedoracle")
    fedavg = seed_mean(final("ma"), "ipma_iid", "fedavg")
    defended = {d: seed_mean(final("ma"), "ipma_iid", d) for d in FLSHIELD}
    ok = fedavg <= IPMA_FEDAVG_MA_MAX and all(abs(v - oracle) <= IPMA_GAP_MAX for v in defended.values())
    criterion("C3", ok, f"FedAvg MA {fedavg:.1f} (need <= {IPMA_FEDAVG_MA_MAX}), FedOracle {oracle:.1f}, "
              + ", ".join(f"{d.split('_')[1]} {v:.1f}" for d, v in defended.items()))
    assert ok


# C4 --------------------------------------------------------------------------

@pytest.mark.slow
def test_c4_dba(criterion):
    fedavg = seed_mean(final("ba"), "dba_iid", "fedavg")
    defended = {d: seed_mean(final("ba"), "dba_iid", d) for d in FLSHIELD}
    rhos = [sweep_spearman(pspb_sweep(get_preset("dba_iid").with_overrides(seed=s), PSPB_VALUES))
            for s in range(3)]
    ok = (fedavg >= DBA_FEDAVG_BA_MIN and all(v <= DBA_DEFENDED_BA_MAX for v in defended.values())
          and max(rhos) < SPEARMAN_MAX)
    criterion("C4", ok, f"FedAvg BA {fedavg:.1f}, " + ", ".join(f"{d.split('_')[1]} BA {v:.1f}"
                                                                for d, v in defended.items())
              + f", PSPB Spearman {[round(r, 2) for r in rhos]}")
    assert ok


# C5 --------------------------------------------------------------------------

@pytest.mark.slow
def test_c5_validator_attacks(criterion):
    ok, parts = True, []
    for preset in ("tlfa_fa_adp", "tlfa_fa_adv"):
        for d in FLSHIELD:
            acc = seed_mean(accepted_malicious_rep_pct, preset, d)
            tpr = seed_mean(active_mean("tpr"), preset, d)
            ok &= acc <= VA_ACCEPTED_MAX and tpr >= VA_TPR_MIN
            parts.append(f"{preset[5:]}/{d.split('_')[1]} accepted {acc:.1f}% TPR {tpr:.1f}")
    for d in FLSHIELD:
        tpr = seed_mean(active_mean("tpr"), "tlfa_fa_adv", d, outlier="none")
        ok &= tpr <= NO_DETECTOR_TPR_MAX
        parts.append(f"no detector/{d.split('_')[1]} TPR {tpr:.1f}")
    criterion("C5", ok, "; ".join(parts))
    assert ok


# C6 --------------------------------------------------------------------------

@pytest.mark.slow
def test_c6_min_vs_mean(criterion):
    ok, parts = True, []
    for d in FLSHIELD:
        lo = seed_mean(active_mean("tpr"), "tlfa_iid", d, projection="mean")
        hi = seed_mean(active_mean("tpr"), "tlfa_iid", d)
        ok &= lo < hi
        parts.append(f"{d.split('_')[1]} mean {lo:.1f} < minimum {hi:.1f}")
    criterion("C6", ok, "; ".join(parts))
    assert ok


# C7 --------------------------------------------------------------------------

@pytest.mark.slow
def test_c7_non_iid_consistency(criterion):
    ratios = [n_distance_ratio(get_preset("tlfa_one_class_expert").with_overrides(seed=s))["ratio"]
              for s in range(3)]
    ok = all(RATIO_RANGE[0] <= r <= RATIO_RANGE[1] for r in ratios)
    criterion("C7", ok, f"intra/inter ratios {[round(r, 3) for r in ratios]} in {list(RATIO_RANGE)}")
    assert ok


# C8 --------------------------------------------------------------------------

@pytest.mark.slow
def test_c8_privacy(criterion):
    probes = [privacy_probe(s, num_clients=12) for s in SEEDS]
    raw = float(np.mean([p.raw_mse for p in probes]))
    rep = float(np.mean([p.representative_mse for p in probes]))
    contributors = min(p.contributors for p in probes)
    ok = contributors >= MIN_CONTRIBUTORS and rep >= PRIVACY_FACTOR * raw
    criterion("C8", ok, f"matched MSE raw {raw:.2e}, representative {rep:.2f} "
                        f"(min contributors {contributors})")
    assert ok


# C9 --------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("FEDSHIELD_INNER_SUITE") == "1", reason="already inside the C9 run")
def test_c9_property_suite(criterion):
    here = Path(__file__).parent
    files = sorted(str(p) for p in here.glob("test_*.py") if p.name != Path(__file__).name)
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *files],
                          capture_output=True, text=True, env={**os.environ, "FEDSHIELD_INNER_SUITE": "1"})
    elapsed = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < SUITE_BUDGET_S
    criterion("C9", ok, f"{tail} ({elapsed:.0f}s)")
    assert ok, proc.stdout[-3000:]
