"""Deterministic numerical primitives.

Everything downstream (episode sampling, selector policies, training)
leans on this module for reproducibility, so the RNG scheme and the
without-replacement sampling chain are specified exactly:

* randomness comes from numpy's PCG64 seeded through SeedSequence, with
  named child streams derived from sha256 of the tag strings, so any
  component can be re-run in isolation and produce the same draws;
* sampling k items without replacement follows the sequential
  renormalization chain: at each draw the remaining probabilities are
  renormalized, one index is drawn, and the per-draw log-probability is
  log(p_i / Z_t).  The total log-probability of the ordered draw is the
  sum of the per-draw terms.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SeededRng",
    "SelectionOutcome",
    "cosine",
    "softmax",
    "log_softmax",
    "logsumexp",
    "sample_without_replacement",
    "finite_diff_grad",
]


def _tag_to_int(tag) -> int:
    """Map a stream tag to a stable 64-bit integer.

    Integers pass through (must be non-negative); strings are hashed with
    sha256 so that child streams do not collide for distinct names.
    """
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"stream tag must be non-negative, got {tag}")
        return int(tag)
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")


class SeededRng:
    """Named hierarchical RNG over PCG64.

    A root stream is built from an integer seed; ``child(*tags)`` derives
    an independent stream keyed by the tag path.  Identical (seed, path)
    pairs always yield identical draws, across processes and platforms.
    """

    def __init__(self, seed: int, _path=()):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise TypeError("seed must be an int")
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(_path)
        key = tuple(_tag_to_int(t) for t in self.path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=key))
        )

    def child(self, *tags) -> "SeededRng":
        """Derive an independent stream for the given tag path."""
        if not tags:
            raise ValueError("child() needs at least one tag")
        return SeededRng(self.seed, self.path + tuple(tags))

    # Thin wrappers so call sites never touch the Generator directly.
    def uniform(self, low=0.0, high=1.0) -> float:
        return float(self._gen.uniform(low, high))

    def uniforms(self, size, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        out = self._gen.normal(loc, scale, size=size)
        return out if size is not None else float(out)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path!r})"


def cosine(a, b) -> float:
    """Cosine similarity of two vectors, clipped to [-1, 1].

    Zero-norm inputs return 0.0 rather than NaN so degenerate embeddings
    stay on the finite path.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def logsumexp(x) -> float:
    """Numerically stable log(sum(exp(x)))."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("logsumexp of empty array")
    m = float(np.max(x))
    if not math.isfinite(m):
        # all -inf stays -inf; +inf or nan propagates
        return m
    return m + math.log(float(np.sum(np.exp(x - m))))


def softmax(x) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


@dataclass
class SelectionOutcome:
    """Result of drawing k indices without replacement.

    ``indices`` are in draw order; ``total_logp`` is the log-probability
    of that ordered sequence under sequential renormalization and always
    equals the sum of ``per_draw_logp``.
    """

    indices: np.ndarray
    per_draw_logp: np.ndarray
    total_logp: float
    params_version: int | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.per_draw_logp = np.asarray(self.per_draw_logp, dtype=np.float64)


def sample_without_replacement(probs, k: int, rng: SeededRng) -> SelectionOutcome:
    """Draw k distinct indices from a probability vector.

    At draw t the distribution over the remaining support is the original
    probabilities renormalized by the remaining mass Z_t; the per-draw
    log-probability recorded is log(p_i) - log(Z_t).
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probs must be a 1-d vector")
    n = p.shape[0]
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probs must be finite and non-negative")
    if abs(float(np.sum(p)) - 1.0) > 1e-9:
        raise ValueError(f"probs must sum to 1, got {float(np.sum(p))!r}")
    support = int(np.count_nonzero(p > 0.0))
    if not (0 < k <= support):
        raise ValueError(f"k={k} out of range for support of size {support}")

    remaining = p.copy()
    indices = np.empty(k, dtype=np.int64)
    per_draw = np.empty(k, dtype=np.float64)
    for t in range(k):
        z = float(np.sum(remaining))
        cum = np.cumsum(remaining)
        u = rng.uniform(0.0, z)
        i = int(np.searchsorted(cum, u, side="right"))
        # guard the measure-zero edge where u lands past the last positive mass
        while remaining[i] == 0.0:
            i -= 1
        per_draw[t] = math.log(remaining[i]) - math.log(z)
        indices[t] = i
        remaining[i] = 0.0
    total = math.fsum(per_draw.tolist())
    return SelectionOutcome(indices=indices, per_draw_logp=per_draw, total_logp=total)


def finite_diff_grad(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a flat vector")
    g = np.empty_like(x)
    for i in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return g
