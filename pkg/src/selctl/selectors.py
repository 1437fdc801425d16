"""Selection strategies behind one interface.

Four strategies, all consuming a label-free PoolView and returning a
SelectionOutcome of K distinct pool positions:

* ``random``: uniform without replacement; the logged total_logp is the
  set probability -log C(N, k).
* ``kmedoids``: PAM (greedy BUILD, then steepest-descent SWAP) on L2
  distances; medoids are always pool members.
* ``medselect``: bidirectional LSTM over the pool's embeddings in the
  task's fixed presentation order; per-position logits through an
  affine head, softmax, then sequential without-replacement sampling.
* ``clinical``: the same sequence model over (age/100, sex, laterality)
  instead of embeddings.

The trainable strategies expose an exact reverse-mode gradient of the
selection log-probability (backpropagation through the renormalized
softmax chain and through time), checked against finite differences.

All recurrent arithmetic is float64.  The LSTM uses the standard
input/forget/output gate equations with gate order [i, f, g, o];
forget-gate biases start at 1.0 and every weight block (including the
scoring head) starts uniform in +-1/sqrt(H), so the initial policy is
close to, but not exactly, uniform.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .numerics import SeededRng, SelectionOutcome, logsumexp, sample_without_replacement, softmax

CKPT_MAGIC = b"SELW1"
_CKPT_HEADER = np.dtype([("input_dim", "<u4"), ("hidden", "<u4"), ("version", "<u4")])

STRATEGIES = ("medselect", "clinical", "random", "kmedoids")
TRAINABLE = ("medselect", "clinical")


@dataclass
class PoolView:
    """What a selector may see: embeddings and clinical features, no labels."""

    embeddings: np.ndarray
    clinical: np.ndarray

    def __post_init__(self):
        if self.embeddings.shape[0] != self.clinical.shape[0]:
            raise ValueError("embeddings and clinical lengths disagree")

    @property
    def n(self) -> int:
        return int(self.embeddings.shape[0])


def pool_view(task) -> PoolView:
    return PoolView(embeddings=task.pool_embeddings(), clinical=task.pool_clinical())


def clinical_inputs(pool: PoolView) -> np.ndarray:
    """Per-item (age/100, sex, laterality) input rows for the clinical model."""
    x = pool.clinical.astype(np.float64).copy()
    x[:, 0] = x[:, 0] / 100.0
    return x


# ---------------------------------------------------------------------------
# parameters


@dataclass
class SelectorParams:
    """BiLSTM selector parameters.

    Weight blocks use gate order [i, f, g, o] stacked along the first
    axis; ``version`` is bumped by the trainer on every update so stale
    SelectionOutcomes cannot be backpropagated.
    """

    input_dim: int
    hidden: int
    wx_f: np.ndarray
    wh_f: np.ndarray
    b_f: np.ndarray
    wx_b: np.ndarray
    wh_b: np.ndarray
    b_b: np.ndarray
    w_head: np.ndarray
    b_head: float
    version: int = 0

    def blocks(self):
        return (
            self.wx_f,
            self.wh_f,
            self.b_f,
            self.wx_b,
            self.wh_b,
            self.b_b,
            self.w_head,
            np.array([self.b_head]),
        )


def n_params(input_dim: int, hidden: int) -> int:
    return 2 * (4 * hidden * input_dim + 4 * hidden * hidden + 4 * hidden) + 2 * hidden + 1


def init_params(input_dim: int, hidden: int, rng: SeededRng) -> SelectorParams:
    if input_dim < 1 or hidden < 1:
        raise ValueError("input_dim and hidden must be positive")
    bound = 1.0 / math.sqrt(hidden)
    h4 = 4 * hidden

    def weights(tag, shape):
        return rng.child(tag).uniforms(shape, -bound, bound)

    def bias():
        b = np.zeros(h4)
        b[hidden : 2 * hidden] = 1.0  # forget gate starts open
        return b

    return SelectorParams(
        input_dim=input_dim,
        hidden=hidden,
        wx_f=weights("wx_f", (h4, input_dim)),
        wh_f=weights("wh_f", (h4, hidden)),
        b_f=bias(),
        wx_b=weights("wx_b", (h4, input_dim)),
        wh_b=weights("wh_b", (h4, hidden)),
        b_b=bias(),
        w_head=weights("w_head", (2 * hidden,)),
        b_head=0.0,
        version=0,
    )


def flatten_params(params: SelectorParams) -> np.ndarray:
    return np.concatenate([b.ravel() for b in params.blocks()])


def unflatten_params(flat, input_dim: int, hidden: int, version: int = 0) -> SelectorParams:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (n_params(input_dim, hidden),):
        raise ValueError(
            f"expected {n_params(input_dim, hidden)} parameters, got {flat.shape}"
        )
    h4 = 4 * hidden
    sizes = [
        h4 * input_dim,
        h4 * hidden,
        h4,
        h4 * input_dim,
        h4 * hidden,
        h4,
        2 * hidden,
        1,
    ]
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return SelectorParams(
        input_dim=input_dim,
        hidden=hidden,
        wx_f=parts[0].reshape(h4, input_dim).copy(),
        wh_f=parts[1].reshape(h4, hidden).copy(),
        b_f=parts[2].copy(),
        wx_b=parts[3].reshape(h4, input_dim).copy(),
        wh_b=parts[4].reshape(h4, hidden).copy(),
        b_b=parts[5].copy(),
        w_head=parts[6].copy(),
        b_head=float(parts[7][0]),
        version=version,
    )


# ---------------------------------------------------------------------------
# LSTM forward/backward


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lstm_forward(wx, wh, b, xs):
    """One-direction LSTM pass; returns hidden states and the BPTT cache."""
    n = xs.shape[0]
    hidden = wh.shape[1]
    pre_x = xs @ wx.T + b
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    hs = np.zeros((n, hidden))
    cache = {
        "h_prev": np.zeros((n, hidden)),
        "c_prev": np.zeros((n, hidden)),
        "i": np.zeros((n, hidden)),
        "f": np.zeros((n, hidden)),
        "g": np.zeros((n, hidden)),
        "o": np.zeros((n, hidden)),
        "tanh_c": np.zeros((n, hidden)),
        "xs": xs,
    }
    for t in range(n):
        z = pre_x[t] + wh @ h
        i = _sigmoid(z[:hidden])
        f = _sigmoid(z[hidden : 2 * hidden])
        g = np.tanh(z[2 * hidden : 3 * hidden])
        o = _sigmoid(z[3 * hidden :])
        cache["h_prev"][t] = h
        cache["c_prev"][t] = c
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t] = i, f, g, o
        cache["tanh_c"][t] = tc
        hs[t] = h
    return hs, cache


def _lstm_backward(wh, cache, dhs):
    """BPTT for one direction; returns (dwx, dwh, db)."""
    n, hidden = dhs.shape
    dzs = np.zeros((n, 4 * hidden))
    dh_next = np.zeros(hidden)
    dc_next = np.zeros(hidden)
    for t in range(n - 1, -1, -1):
        i, f, g, o = cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t]
        tc = cache["tanh_c"][t]
        dh = dhs[t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * cache["c_prev"][t]
        dg = dc * i
        dc_next = dc * f
        dz = dzs[t]
        dz[:hidden] = di * i * (1.0 - i)
        dz[hidden : 2 * hidden] = df * f * (1.0 - f)
        dz[2 * hidden : 3 * hidden] = dg * (1.0 - g * g)
        dz[3 * hidden :] = do * o * (1.0 - o)
        dh_next = wh.T @ dz
    dwx = dzs.T @ cache["xs"]
    dwh = dzs.T @ cache["h_prev"]
    db = dzs.sum(axis=0)
    return dwx, dwh, db


def _bilstm(params: SelectorParams, xs):
    """Logits plus caches for both directions and the concatenated states."""
    if xs.ndim != 2 or xs.shape[1] != params.input_dim:
        raise ValueError(
            f"input dim mismatch: pool gives {xs.shape[1:]}, params expect {params.input_dim}"
        )
    hs_f, cache_f = _lstm_forward(params.wx_f, params.wh_f, params.b_f, xs)
    hs_b_rev, cache_b = _lstm_forward(params.wx_b, params.wh_b, params.b_b, xs[::-1])
    h_cat = np.concatenate([hs_f, hs_b_rev[::-1]], axis=1)
    logits = h_cat @ params.w_head + params.b_head
    return logits, h_cat, cache_f, cache_b


def medselect_forward(params: SelectorParams, pool: PoolView) -> np.ndarray:
    """Per-pool-item logits from the embedding-fed BiLSTM."""
    return _bilstm(params, pool.embeddings)[0]


def clinical_forward(params: SelectorParams, pool: PoolView) -> np.ndarray:
    """Per-pool-item logits from the clinical-features BiLSTM."""
    return _bilstm(params, clinical_inputs(pool))[0]


# ---------------------------------------------------------------------------
# selection log-probability


def selection_logp(logits, indices):
    """(total_logp, per_draw_logp) of an ordered without-replacement draw.

    Draw t contributes logits[a_t] - logsumexp(logits over the not-yet-
    drawn support), which is exactly the renormalized softmax chain.
    """
    logits = np.asarray(logits, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    mask = np.ones(logits.shape[0], dtype=bool)
    per_draw = np.zeros(indices.shape[0])
    for t, idx in enumerate(indices):
        if not mask[idx]:
            raise ValueError(f"index {idx} drawn twice")
        per_draw[t] = logits[idx] - logsumexp(logits[mask])
        mask[idx] = False
    return math.fsum(per_draw.tolist()), per_draw


def selection_logits_grad(logits, indices) -> np.ndarray:
    """d total_logp / d logits: sum over draws of (onehot - masked softmax)."""
    logits = np.asarray(logits, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    n = logits.shape[0]
    mask = np.ones(n, dtype=bool)
    grad = np.zeros(n)
    for idx in indices:
        lse = logsumexp(logits[mask])
        soft = np.zeros(n)
        soft[mask] = np.exp(logits[mask] - lse)
        grad -= soft
        grad[idx] += 1.0
        mask[idx] = False
    return grad


def _select_with_model(params, pool, k, rng, xs) -> SelectionOutcome:
    logits, _, _, _ = _bilstm(params, xs)
    probs = softmax(logits)
    outcome = sample_without_replacement(probs, int(k), rng)
    outcome.params_version = params.version
    return outcome


def medselect_select(params: SelectorParams, pool: PoolView, k, rng: SeededRng) -> SelectionOutcome:
    return _select_with_model(params, pool, k, rng, pool.embeddings)


def clinical_select(params: SelectorParams, pool: PoolView, k, rng: SeededRng) -> SelectionOutcome:
    return _select_with_model(params, pool, k, rng, clinical_inputs(pool))


def _backward_with_model(params, outcome, scale, xs) -> np.ndarray:
    if outcome.params_version is not None and outcome.params_version != params.version:
        raise ValueError(
            f"stale outcome: drawn under params version {outcome.params_version}, "
            f"current is {params.version}"
        )
    logits, h_cat, cache_f, cache_b = _bilstm(params, xs)
    dlogits = float(scale) * selection_logits_grad(logits, outcome.indices)
    dw_head = h_cat.T @ dlogits
    db_head = float(np.sum(dlogits))
    dh_cat = np.outer(dlogits, params.w_head)
    hidden = params.hidden
    dwx_f, dwh_f, db_f = _lstm_backward(params.wh_f, cache_f, dh_cat[:, :hidden])
    dwx_b, dwh_b, db_b = _lstm_backward(params.wh_b, cache_b, dh_cat[::-1, hidden:])
    return np.concatenate(
        [
            dwx_f.ravel(),
            dwh_f.ravel(),
            db_f,
            dwx_b.ravel(),
            dwh_b.ravel(),
            db_b,
            dw_head,
            [db_head],
        ]
    )


def medselect_backward(params: SelectorParams, pool: PoolView, outcome, scale: float) -> np.ndarray:
    """scale * d(total_logp)/d(params), flattened in flatten_params order."""
    return _backward_with_model(params, outcome, scale, pool.embeddings)


def clinical_backward(params: SelectorParams, pool: PoolView, outcome, scale: float) -> np.ndarray:
    return _backward_with_model(params, outcome, scale, clinical_inputs(pool))


# ---------------------------------------------------------------------------
# non-trainable strategies


def random_select(pool: PoolView, k, rng: SeededRng) -> SelectionOutcome:
    """Uniform without-replacement selection.

    The recorded total is the set probability -log C(N, k); per-draw
    entries log((k-t)/(N-t)) are the chance the t-th uniform draw lands
    in the selected set, so they sum to the total exactly.
    """
    n = pool.n
    k = int(k)
    if not 0 < k <= n:
        raise ValueError(f"k={k} out of range for pool of {n}")
    indices = np.asarray(rng.permutation(n)[:k], dtype=np.int64)
    per_draw = np.array([math.log(k - t) - math.log(n - t) for t in range(k)])
    return SelectionOutcome(
        indices=indices, per_draw_logp=per_draw, total_logp=math.fsum(per_draw.tolist())
    )


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def pam_kmedoids(dist: np.ndarray, k: int, max_iters: int = 100):
    """PAM: greedy BUILD then steepest-descent SWAP on a distance matrix.

    Returns (medoid indices sorted ascending, cost history).  Ties break
    toward the lowest index; only strictly cost-reducing swaps are taken
    so the cost history is non-increasing and the loop terminates.
    """
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if not 0 < k <= n:
        raise ValueError(f"k={k} out of range for {n} points")

    medoids = [int(np.argmin(dist.sum(axis=1)))]
    dnear = dist[medoids[0]].copy()
    while len(medoids) < k:
        gains = np.maximum(dnear[None, :] - dist, 0.0).sum(axis=1)
        gains[medoids] = -np.inf
        j = int(np.argmax(gains))
        medoids.append(j)
        dnear = np.minimum(dnear, dist[j])
    medoids = sorted(medoids)
    history = [float(dnear.sum())]

    for _ in range(max_iters):
        dmat = dist[medoids]
        order = np.argsort(dmat, axis=0, kind="stable")
        cols = np.arange(n)
        nearest = order[0]
        dnear = dmat[nearest, cols]
        dsecond = dmat[order[1], cols] if k > 1 else np.full(n, np.inf)
        best_delta, best_swap = -1e-12, None
        for mi in range(k):
            mine = nearest == mi
            base = float(dnear[mine].sum())
            fixed = np.minimum(dist[:, ~mine] - dnear[~mine][None, :], 0.0).sum(axis=1)
            moved = np.minimum(dist[:, mine], dsecond[mine][None, :]).sum(axis=1)
            deltas = fixed + moved - base
            deltas[medoids] = np.inf
            h = int(np.argmin(deltas))
            if deltas[h] < best_delta:
                best_delta, best_swap = float(deltas[h]), (mi, h)
        if best_swap is None:
            break
        medoids[best_swap[0]] = best_swap[1]
        medoids = sorted(medoids)
        dnear = np.min(dist[medoids], axis=0)
        history.append(float(dnear.sum()))
    return np.array(medoids, dtype=np.int64), history


def kmedoids_select(pool: PoolView, k, rng: SeededRng | None = None) -> SelectionOutcome:
    """Deterministic PAM medoids of the pool embeddings (probability 1)."""
    medoids, _ = pam_kmedoids(pairwise_distances(pool.embeddings), int(k))
    zeros = np.zeros(medoids.shape[0])
    return SelectionOutcome(indices=medoids, per_draw_logp=zeros, total_logp=0.0)


def select(strategy: str, params, pool: PoolView, k, rng: SeededRng) -> SelectionOutcome:
    """Uniform entry point over all strategies."""
    if strategy == "medselect":
        return medselect_select(params, pool, k, rng)
    if strategy == "clinical":
        return clinical_select(params, pool, k, rng)
    if strategy == "random":
        return random_select(pool, k, rng)
    if strategy == "kmedoids":
        return kmedoids_select(pool, k, rng)
    raise ValueError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# checkpoint IO


def save_checkpoint(params: SelectorParams, path, extra_meta=None):
    """Little-endian binary: magic SELW1, {u32 input_dim, u32 hidden,
    u32 version}, then every weight block as f64 in flatten order."""
    header = np.zeros(1, dtype=_CKPT_HEADER)
    header["input_dim"] = params.input_dim
    header["hidden"] = params.hidden
    header["version"] = params.version
    flat = flatten_params(params).astype("<f8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(header.tobytes())
        f.write(flat.tobytes())
    meta = {
        "input_dim": params.input_dim,
        "hidden": params.hidden,
        "version": params.version,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_checkpoint(path) -> SelectorParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint")
    off = len(CKPT_MAGIC)
    if len(blob) < off + _CKPT_HEADER.itemsize:
        raise DataError(f"{path}: truncated header")
    header = np.frombuffer(blob, dtype=_CKPT_HEADER, count=1, offset=off)[0]
    input_dim, hidden, version = (
        int(header["input_dim"]),
        int(header["hidden"]),
        int(header["version"]),
    )
    count = n_params(input_dim, hidden)
    expected = off + _CKPT_HEADER.itemsize + 8 * count
    if len(blob) != expected:
        raise DataError(f"{path}: size mismatch, expected {expected} bytes got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8", count=count, offset=off + _CKPT_HEADER.itemsize)
    params = unflatten_params(np.asarray(flat, dtype=np.float64), input_dim, hidden, version)
    if not np.all(np.isfinite(flatten_params(params))):
        raise DataError(f"{path}: non-finite parameter")
    return params
