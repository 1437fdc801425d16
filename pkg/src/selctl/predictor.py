"""Prototype cosine predictor.

Fit computes the mean embedding of each class in the labeled support
set; scoring a query item returns cosine(x, positive prototype) minus
cosine(x, negative prototype).  A class absent from the support set
contributes 0 to its cosine term rather than erroring, so degenerate
single-class selections stay on the reward path with a low score
instead of aborting an episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import cosine


@dataclass
class Prototypes:
    p: np.ndarray
    n: np.ndarray
    has_p: bool
    has_n: bool


def _exact_mean(rows: np.ndarray) -> np.ndarray:
    # fsum per column: exact, hence permutation-invariant
    return np.array(
        [math.fsum(rows[:, j].tolist()) / rows.shape[0] for j in range(rows.shape[1])]
    )


def fit(embeddings, labels) -> Prototypes:
    """Class-mean prototypes from a labeled support set."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"support shapes disagree: {x.shape} vs {y.shape}")
    if x.shape[0] < 1:
        raise ValueError("empty support set")
    d = x.shape[1]
    pos = x[y == 1]
    neg = x[y == 0]
    has_p, has_n = pos.shape[0] > 0, neg.shape[0] > 0
    return Prototypes(
        p=_exact_mean(pos) if has_p else np.zeros(d),
        n=_exact_mean(neg) if has_n else np.zeros(d),
        has_p=has_p,
        has_n=has_n,
    )


def score(protos: Prototypes, x) -> float:
    """cosine(x, p) - cosine(x, n); a missing class contributes 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != protos.p.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {protos.p.shape}")
    sp = cosine(x, protos.p) if protos.has_p else 0.0
    sn = cosine(x, protos.n) if protos.has_n else 0.0
    return sp - sn


def score_query(protos: Prototypes, query_embeddings) -> np.ndarray:
    """Elementwise score over a query set, order-preserving."""
    q = np.asarray(query_embeddings, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError("query embeddings must be 2-d")
    return np.array([score(protos, q[i]) for i in range(q.shape[0])])
