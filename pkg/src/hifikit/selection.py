"""Choosing component subsets from fidelity information.

Ties are always broken toward lower indices (and lexicographically smaller
index sets) so every search is deterministic.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceeded
from .fidelity import CSM, DEFAULT_LAMBDA, SingletonScores, singleton_scores, subset_fidelity

NAIVE = "naive_topk"
EXHAUSTIVE = "exhaustive"
MONTE_CARLO = "monte_carlo"

DEFAULT_BUDGET = 2_000_000
DEFAULT_MC_SAMPLES = 1000
LARGE_MC_SAMPLES = 100
LARGE_DIM = 256


@dataclass
class HiFiSet:
    indices: tuple
    k: int
    fidelity: float
    method: str
    layer: int = -1
    channel: int = -1


def topk_indices(values, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, lower index first among ties, sorted."""
    values = np.asarray(values, dtype=np.float64)
    order = np.lexsort((np.arange(values.size), -values))
    return np.sort(order[:k])


def naive_topk(scores, k: int, csm: CSM | None = None, lam: float = DEFAULT_LAMBDA) -> HiFiSet:
    """The ``k`` components with the largest singleton fidelity.

    ``scores`` may be :class:`SingletonScores` or a plain score vector. If
    ``csm`` is given the subset fidelity of the chosen set is reported.
    """
    s = scores.s if isinstance(scores, SingletonScores) else np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= s.size:
        raise ValueError(f"k must be in [1, {s.size}]")
    idx = topk_indices(s, k)
    fs = float("nan") if csm is None else subset_fidelity(csm, idx, lam).fidelity
    layer, channel = (csm.layer, csm.channel) if isinstance(csm, CSM) else (-1, -1)
    return HiFiSet(tuple(idx.tolist()), k, fs, NAIVE, layer, channel)


def exhaustive_mfs(csm: CSM, k: int, lam: float = DEFAULT_LAMBDA, budget: int = DEFAULT_BUDGET) -> HiFiSet:
    """Size-``k`` subset of maximum fidelity by full enumeration."""
    n = csm.dim
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    count = math.comb(n, k)
    if count > budget:
        raise BudgetExceeded(f"C({n}, {k}) = {count} subsets exceeds budget {budget}")
    best, best_fs = None, -math.inf
    for subset in itertools.combinations(range(n), k):
        fs = subset_fidelity(csm, subset, lam).fidelity
        if fs > best_fs:
            best, best_fs = subset, fs
    return HiFiSet(tuple(best), k, best_fs, EXHAUSTIVE, csm.layer, csm.channel)


def monte_carlo_mfs(csm: CSM, k: int, n_samples: int | None = None, seed: int = 0, lam: float = DEFAULT_LAMBDA) -> HiFiSet:
    """Best of ``n_samples`` uniformly random size-``k`` subsets.

    Always a lower bound on the exhaustive optimum.
    """
    n = csm.dim
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    if n_samples is None:
        n_samples = LARGE_MC_SAMPLES if n >= LARGE_DIM else DEFAULT_MC_SAMPLES
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    best, best_fs = None, -math.inf
    seen = {}
    for _ in range(n_samples):
        subset = tuple(np.sort(rng.choice(n, size=k, replace=False)).tolist())
        if subset not in seen:
            seen[subset] = subset_fidelity(csm, subset, lam).fidelity
        fs = seen[subset]
        if fs > best_fs or (fs == best_fs and subset < best):
            best, best_fs = subset, fs
    return HiFiSet(best, k, best_fs, MONTE_CARLO, csm.layer, csm.channel)


def best_subset(csm: CSM, k: int, method: str = EXHAUSTIVE, lam: float = DEFAULT_LAMBDA, **kw) -> HiFiSet:
    if method == NAIVE:
        return naive_topk(singleton_scores(csm), k, csm, lam)
    if method == EXHAUSTIVE:
        return exhaustive_mfs(csm, k, lam, kw.get("budget", DEFAULT_BUDGET))
    if method == MONTE_CARLO:
        return monte_carlo_mfs(csm, k, kw.get("n_samples"), kw.get("seed", 0), lam)
    raise ValueError(f"unknown selection method {method!r}")


def hifi_check(csm: CSM, k: int, eta: float, method: str = EXHAUSTIVE, lam: float = DEFAULT_LAMBDA, **kw):
    """A ``(k, eta)`` high-fidelity set found by ``method``, or ``None``."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    found = best_subset(csm, k, method, lam, **kw)
    return found if found.fidelity >= eta else None


def mfs_sweep(csm: CSM, ks=None, methods=(NAIVE, EXHAUSTIVE), lam: float = DEFAULT_LAMBDA, **kw) -> list:
    """Maximum fidelity per subset size, as report rows."""
    ks = range(1, csm.dim + 1) if ks is None else ks
    rows = []
    for k in ks:
        for m in methods:
            h = best_subset(csm, k, m, lam, **kw)
            rows.append(
                {
                    "layer": csm.layer,
                    "channel": csm.channel,
                    "k": k,
                    "method": m,
                    "fidelity": h.fidelity,
                    "indices": " ".join(str(i) for i in h.indices),
                }
            )
    return rows


SWEEP_FIELDS = ("layer", "channel", "k", "method", "fidelity", "indices")


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_FIELDS})
