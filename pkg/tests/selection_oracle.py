"""Tiny delay-table instances and an exhaustive optimum, shared by unit and acceptance tests."""
import itertools

import numpy as np

from macsel.select import DelayTable

PSUM = 50.0


def tiny_instance(seed: int, n_w: int = 4, n_a: int = 6, lo: int = 60, hi: int = 100) -> DelayTable:
    rng = np.random.default_rng(seed)
    d = rng.integers(lo, hi + 1, (n_w, n_a, n_a)).astype(float)
    d[0] = PSUM  # weight 0: constant product, only the partial-sum path
    for i in range(n_a):
        d[:, i, i] = PSUM
    return DelayTable(np.arange(n_w), np.arange(n_a), d, PSUM)


def brute_force_best(table: DelayTable, threshold: float, protected_w=(0,), protected_a=(0,)) -> int:
    """Largest |W| x |A| over all feasible subsets containing the protected values."""
    wi = [i for i, w in enumerate(table.weights) if w not in protected_w]
    ai = [i for i, a in enumerate(table.acts) if a not in protected_a]
    pw = [i for i, w in enumerate(table.weights) if w in protected_w]
    pa = [i for i, a in enumerate(table.acts) if a in protected_a]
    best = 0
    for kw in range(len(wi) + 1):
        for W in itertools.combinations(wi, kw):
            W = list(W) + pw
            for ka in range(len(ai) + 1):
                for A in itertools.combinations(ai, ka):
                    A = list(A) + pa
                    if (len(W) * len(A) > best
                            and table.delays[np.ix_(W, A, A)].max() <= threshold):
                        best = len(W) * len(A)
    return best
