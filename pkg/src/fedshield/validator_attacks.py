"""Defense-aware validator attacks.

Malicious validators rewrite their per-class loss-impact reports to push
malicious representatives into the accepted half while staying close enough
to the honest reports to survive outlier filtering. Both attacks work on the
``(validators, representatives, classes)`` report tensor and never touch the
rows of honest validators.

The attacker does not see honest reports. Following the usual estimation
assumption it uses its own validators' truthful reports as the stand-in for
the honest ones, both to compute scores and to simulate the server's outlier
check before committing a change.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .defense import accept_count, rank_order
from .validation import detect_outliers, impute

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackerView:
    """What the colluding validators know when crafting reports."""
    rep_is_malicious: np.ndarray          # bool per representative
    outlier: str = "robust_mahalanobis"
    contamination: float = 0.45
    rule: str = "ceil"


def _filled(reports):
    """NaN cells replaced by the mean over validators (0 if never observed)."""
    R = np.asarray(reports, dtype=float)
    mu = np.nanmean(np.where(np.isnan(R).all(axis=0, keepdims=True), 0.0, R), axis=0)
    return np.where(np.isnan(R), mu[None], R)


def benign_estimate(truthful_mal) -> np.ndarray:
    return _filled(truthful_mal).mean(axis=0)


def _stand_ins(truthful_mal, n_benign: int) -> np.ndarray:
    T = _filled(truthful_mal)
    return T[np.arange(n_benign) % T.shape[0]]


def stealthy(crafted, truthful_mal, n_benign: int, view: AttackerView) -> bool:
    """Would every crafted report pass the server's outlier check?"""
    crafted = np.asarray(crafted, dtype=float)
    sim = np.concatenate([_stand_ins(truthful_mal, n_benign), _filled(crafted)])
    k = sim.shape[0]
    keep = detect_outliers(impute(sim.reshape(k, -1), "mean"), view.outlier, view.contamination)
    return bool(keep[n_benign:].all())


def simulated_scores(crafted, truthful_mal, n_benign: int) -> np.ndarray:
    """Attacker-side min-of-mean scores assuming honest rows equal the estimate."""
    est = benign_estimate(truthful_mal)
    n_mal = crafted.shape[0]
    mean = (n_benign * est + _filled(crafted).sum(axis=0)) / (n_benign + n_mal)
    return mean.min(axis=1)


def _accepted(scores, rule):
    return set(int(e) for e in rank_order(scores)[: accept_count(len(scores), rule)])


# FA-Adv ---------------------------------------------------------------------

def fa_adv_craft(benign_reports, truthful_mal, view: AttackerView, margin: float = 1e-6):
    """Minimal targeted alteration of the malicious validators' reports.

    ``benign_reports`` is the attacker's picture of the honest validators
    (``(|V_b|, m, c)``), ``truthful_mal`` the malicious validators' own
    honest evaluation (``(|V_m|, m, c)``, NaN allowed). Returns the crafted
    malicious reports; with no malicious validator the result is empty.

    Representatives are visited by distance of their score from the minimum.
    A rejected malicious representative is lifted to just above the lowest
    accepted benign one: every class of it below that level is set so the
    all-validator mean equals the target. The displaced benign representative
    has its weakest class pulled down to the malicious one's old score. The
    cell values solve ``(|V|*target - sum over honest) / |V_m|``. After each
    swap the attacker replays the outlier check and stops at the first swap
    that would expose a crafted report.
    """
    truthful_mal = np.asarray(truthful_mal, dtype=float)
    B = _filled(np.asarray(benign_reports, dtype=float))
    n_mal = truthful_mal.shape[0]
    if n_mal == 0:
        return truthful_mal.copy()
    n_ben = B.shape[0]
    n_all = n_ben + n_mal
    crafted = truthful_mal.copy()
    mal_rep = np.asarray(view.rep_is_malicious, dtype=bool)
    honest_sum = B.sum(axis=0)

    def all_mean():
        return (honest_sum + _filled_like(crafted, truthful_mal).sum(axis=0)) / n_all

    scores = all_mean().min(axis=1)
    order = np.argsort(np.abs(scores - scores.min()), kind="stable")
    for x in order:
        x = int(x)
        scores = all_mean().min(axis=1)
        acc = _accepted(scores, view.rule)
        if not mal_rep[x] or x in acc:
            continue
        victims = [e for e in acc if not mal_rep[e]]
        if not victims:
            break
        y = min(victims, key=lambda e: (scores[e], e))
        trial = crafted.copy()
        target = scores[y] + margin * max(1.0, abs(scores[y]))
        mean_x = all_mean()[x]
        for cl in np.flatnonzero(mean_x < target):
            trial[:, x, cl] = (n_all * target - honest_sum[x, cl]) / n_mal
        cl_y = int(np.argmin(all_mean()[y]))
        trial[:, y, cl_y] = (n_all * scores[x] - honest_sum[y, cl_y]) / n_mal
        if not stealthy(trial, truthful_mal, n_ben, view):
            log.debug("fa_adv: swap of rep %d with %d would be detected; stopping", x, y)
            break
        crafted = trial
    return crafted


def _filled_like(crafted, truthful_mal):
    # crafted cells are always finite; untouched NaN cells take the attacker's estimate
    est = benign_estimate(truthful_mal)
    return np.where(np.isnan(crafted), est[None], crafted)


# FA-Adp ---------------------------------------------------------------------

DEFAULT_GRID = (0.1, 1.0, 10.0)


def fa_adp_objective(N_mal, benign_mean, mal_rep, lam1, lam2) -> float:
    """Signed ``f1 - lam1*f2 - lam2*f3`` (see :func:`fa_adp_optimize`)."""
    s = N_mal.mean(axis=0).min(axis=1)
    f1 = s[mal_rep].sum()
    f2 = s[~mal_rep].sum()
    f3 = np.abs(N_mal - benign_mean[None]).sum()
    return float(f1 - lam1 * f2 - lam2 * f3)


def fa_adp_optimize(start, benign_mean, mal_rep, lam1: float, lam2: float,
                    iters: int = 1000, step: float = 0.01) -> np.ndarray:
    """Proximal subgradient ascent on ``f1 - lam1*f2 - lam2*f3``.

    ``f1`` (``f2``) sums the min-over-classes of the malicious validators'
    mean report over malicious (benign) representatives; ``f3`` is the L1
    distance of every crafted report from the honest-mean estimate. The min
    is differentiated at its first arg-min class, and the L1 term is handled
    by soft-thresholding toward ``benign_mean``.
    """
    N = np.array(start, dtype=float, copy=True)
    n_mal = N.shape[0]
    mal_rep = np.asarray(mal_rep, dtype=bool)
    weight = np.where(mal_rep, 1.0, -lam1) / n_mal
    rows = np.arange(N.shape[1])
    for _ in range(iters):
        cl = N.mean(axis=0).argmin(axis=1)
        N[:, rows, cl] += step * weight[None, :]
        if lam2 > 0:
            d = N - benign_mean[None]
            N = benign_mean[None] + np.sign(d) * np.maximum(np.abs(d) - step * lam2, 0.0)
    return N


def fa_adp_craft(truthful_mal, view: AttackerView, n_benign: int, grid: Sequence[float] = DEFAULT_GRID,
                 iters: int = 1000, step: float = 0.01) -> Tuple[np.ndarray, Optional[Tuple[float, float]]]:
    """Grid search over ``(lam1, lam2)``; the winner is the cell whose crafted
    reports, replayed through the attacker's simulation of outlier filtering
    and ranking, admit the most malicious representatives, then the one that
    narrows the malicious-minus-benign score gap the most.

    Returns ``(crafted, (lam1, lam2))``.
    """
    truthful_mal = np.asarray(truthful_mal, dtype=float)
    if truthful_mal.shape[0] == 0:
        return truthful_mal.copy(), None
    mal_rep = np.asarray(view.rep_is_malicious, dtype=bool)
    est = benign_estimate(truthful_mal)
    start = _filled(truthful_mal)

    def gap(scores):
        if not mal_rep.any() or mal_rep.all():
            return 0.0
        return float(scores[mal_rep].mean() - scores[~mal_rep].mean())

    base_gap = gap(simulated_scores(truthful_mal, truthful_mal, n_benign))
    best, best_key, best_cell = truthful_mal.copy(), (0, 0.0), None
    for lam1, lam2 in itertools.product(grid, grid):
        N = fa_adp_optimize(start, est, mal_rep, lam1, lam2, iters, step)
        if stealthy(N, truthful_mal, n_benign, view):
            scores = simulated_scores(N, truthful_mal, n_benign)
            admitted = sum(1 for e in _accepted(scores, view.rule) if mal_rep[e])
            key = (admitted, gap(scores) - base_gap)
        else:
            key = (0, -np.inf)
        if best_cell is None or key > best_key:
            best, best_key, best_cell = N, key, (lam1, lam2)
    return best, best_cell


def make_crafter(kind: str, view: AttackerView, iters: int = 1000, step: float = 0.01):
    """Adapter for :func:`fedshield.validation.run_validation`'s ``craft`` hook."""
    def craft(raw, mal_mask):
        raw = np.asarray(raw, dtype=float)
        mal_mask = np.asarray(mal_mask, dtype=bool)
        if not mal_mask.any():
            return raw.copy()
        truthful = raw[mal_mask]
        n_ben = int((~mal_mask).sum())
        if kind == "fa_adv":
            est = np.broadcast_to(benign_estimate(truthful), (n_ben,) + raw.shape[1:])
            crafted = fa_adv_craft(est, truthful, view)
        elif kind == "fa_adp":
            crafted, cell = fa_adp_craft(truthful, view, n_ben, iters=iters, step=step)
            log.debug("fa_adp picked grid cell %s", cell)
        else:
            raise ValueError(f"unknown validator attack {kind!r}")
        out = raw.copy()
        out[mal_mask] = crafted
        return out
    return craft
