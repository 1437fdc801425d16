"""Reward and analysis statistics.

AUROC follows the Mann-Whitney formulation with half credit for tied
pairs, computed through midranks so it matches brute-force pair
counting exactly (rank sums are half-integers, which float64 carries
without rounding at these sizes).  Wasserstein-1 is the L1 distance
between quantile functions: for equal sample sizes that is exactly the
mean absolute difference of the sorted samples, otherwise the merged
piecewise-constant CDFs are integrated exactly.  The Welch t-test gets
its two-sided p-value from the regularized incomplete beta function,
evaluated with a Lentz-style continued fraction.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "auroc",
    "wasserstein1",
    "welch_ttest",
    "reg_inc_beta",
    "pairwise_l2_stats",
]


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores/labels shapes disagree: {s.shape} vs {y.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    if n_pos + n_neg != s.shape[0]:
        raise ValueError("labels must be 0 or 1")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    midranks = ends - (counts - 1) / 2.0  # 1-based midrank per distinct value
    rank_sum_pos = float(np.sum(midranks[inverse][y == 1]))
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def wasserstein1(a, b) -> float:
    """L1 distance between empirical quantile functions."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    merged = np.sort(np.concatenate([a, b]))
    deltas = np.diff(merged)
    fa = np.searchsorted(a, merged[:-1], side="right") / a.size
    fb = np.searchsorted(b, merged[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * deltas))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta, modified Lentz scheme."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-14:
            return h
    raise FloatingPointError("incomplete beta continued fraction did not converge")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return float(x)
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def welch_ttest(a, b) -> tuple:
    """Welch two-sample t-test: (t, two-sided p, Welch-Satterthwaite dof)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 observations")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite sample")
    va = float(np.var(a, ddof=1))
    vb = float(np.var(b, ddof=1))
    if va == 0.0 and vb == 0.0:
        raise ValueError("zero variance in both samples")
    sa, sb = va / a.size, vb / b.size
    t = (float(np.mean(a)) - float(np.mean(b))) / math.sqrt(sa + sb)
    dof = (sa + sb) ** 2 / (sa**2 / (a.size - 1) + sb**2 / (b.size - 1))
    if t == 0.0:
        return 0.0, 1.0, dof
    x = dof / (dof + t * t)
    p = reg_inc_beta(dof / 2.0, 0.5, x)
    return t, min(1.0, p), dof


def pairwise_l2_stats(embeddings) -> tuple:
    """All C(K,2) pairwise L2 distances: (mean, max, distances)."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 vectors")
    iu, ju = np.triu_indices(x.shape[0], k=1)
    dists = np.linalg.norm(x[iu] - x[ju], axis=1)
    return float(np.mean(dists)), float(np.max(dists)), dists
