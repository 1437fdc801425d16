"""REINFORCE meta-training of the trainable selectors.

Per episode: select K pool items, reveal their labels through the
oracle, fit prototypes, score the query set, and take AUROC as the
reward R.  A fresh uniform-random selection on the same task (its own
derived seed stream, independent of the policy's) provides the baseline
reward b.  The policy gradient is the batch mean of
(R - b) * d log P(selection | pool) / d params, applied with Adam as
gradient ascent.  Checkpoints are kept for the best meta-validation
reward seen; validation reuses the same derived seed every time so the
metric is comparable across checkpoints.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import predictor, selectors
from .errors import ConfigError, NumericalAbort
from .metrics import auroc
from .numerics import SeededRng

log = logging.getLogger("selctl.trainer")


@dataclass
class TrainConfig:
    k: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_every: int = 10
    hidden: int = 256
    baseline_draws: int = 1
    grad_clip_norm: float = 0.0  # 0 disables clipping
    greedy_validation: bool = False
    seed: int = 0

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must be in [0, 1)")
        if self.adam_eps <= 0 or self.val_every < 1 or self.hidden < 1:
            raise ConfigError("adam_eps, val_every and hidden must be positive")
        if self.baseline_draws < 1:
            raise ConfigError("baseline_draws must be >= 1")
        if self.grad_clip_norm < 0:
            raise ConfigError("grad_clip_norm must be >= 0")
        return self


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_adam(n: int) -> AdamState:
    return AdamState(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_update(flat, grad, state: AdamState, config: TrainConfig) -> np.ndarray:
    """One Adam ascent step (we maximize reward); mutates state."""
    state.step += 1
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    mhat = state.m / (1.0 - config.beta1**state.step)
    vhat = state.v / (1.0 - config.beta2**state.step)
    return flat + config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)


ADAM_MAGIC = b"SELA1"


def save_adam(state: AdamState, path):
    """Sidecar: magic SELA1, u32 param count, u64 step, then m and v as f64."""
    n = state.m.shape[0]
    with open(path, "wb") as f:
        f.write(ADAM_MAGIC)
        f.write(np.array([n], dtype="<u4").tobytes())
        f.write(np.array([state.step], dtype="<u8").tobytes())
        f.write(state.m.astype("<f8").tobytes())
        f.write(state.v.astype("<f8").tobytes())


def load_adam(path) -> AdamState:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(ADAM_MAGIC)] != ADAM_MAGIC:
        raise ValueError(f"{path}: bad magic, not an optimizer sidecar")
    off = len(ADAM_MAGIC)
    n = int(np.frombuffer(blob, dtype="<u4", count=1, offset=off)[0])
    step = int(np.frombuffer(blob, dtype="<u8", count=1, offset=off + 4)[0])
    expected = off + 12 + 16 * n
    if len(blob) != expected:
        raise ValueError(f"{path}: size mismatch, expected {expected} bytes got {len(blob)}")
    m = np.frombuffer(blob, dtype="<f8", count=n, offset=off + 12).astype(np.float64)
    v = np.frombuffer(blob, dtype="<f8", count=n, offset=off + 12 + 8 * n).astype(np.float64)
    return AdamState(m=m, v=v, step=step)


@dataclass
class EpisodeResult:
    task_id: int
    strategy: str
    reward: float
    baseline: float | None
    advantage: float | None
    outcome: object
    pool: object = field(repr=False, default=None)


def _reward(task, pool, indices) -> float:
    labels = task.labeling_oracle(indices)
    protos = predictor.fit(pool.embeddings[np.asarray(indices, dtype=np.int64)], labels)
    scores = predictor.score_query(protos, task.query_embeddings())
    return auroc(scores, task.query_labels())


def run_episode(params, task, k, rng: SeededRng, strategy: str, baseline_draws: int = 1) -> EpisodeResult:
    """Select, label, fit, score; trainable strategies also get a baseline."""
    if strategy not in selectors.STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    pool = selectors.pool_view(task)
    outcome = selectors.select(strategy, params, pool, k, rng.child("select"))
    reward = _reward(task, pool, outcome.indices)
    baseline = advantage = None
    if strategy in selectors.TRAINABLE and baseline_draws > 0:
        draws = [
            _reward(task, pool, selectors.random_select(pool, k, rng.child("baseline", j)).indices)
            for j in range(baseline_draws)
        ]
        baseline = math.fsum(draws) / len(draws)
        advantage = reward - baseline
    return EpisodeResult(
        task_id=task.task_id,
        strategy=strategy,
        reward=reward,
        baseline=baseline,
        advantage=advantage,
        outcome=outcome,
        pool=pool,
    )


def policy_gradient_step(params, adam: AdamState, episodes, config: TrainConfig, strategy: str):
    """Batch-mean REINFORCE gradient, Adam ascent, params version bump."""
    backward = (
        selectors.medselect_backward if strategy == "medselect" else selectors.clinical_backward
    )
    total = np.zeros(selectors.n_params(params.input_dim, params.hidden))
    for ep in episodes:
        if ep.advantage == 0.0:
            continue  # exact zero contribution, skip the BPTT
        total += backward(params, ep.pool, ep.outcome, ep.advantage)
    grad = total / len(episodes)
    if not np.all(np.isfinite(grad)):
        raise NumericalAbort(
            "non-finite policy gradient", task_ids=[ep.task_id for ep in episodes]
        )
    if config.grad_clip_norm > 0:
        norm = float(np.linalg.norm(grad))
        if norm > config.grad_clip_norm:
            grad = grad * (config.grad_clip_norm / norm)
    flat = adam_update(selectors.flatten_params(params), grad, adam, config)
    if not np.all(np.isfinite(flat)):
        raise NumericalAbort(
            "non-finite parameters after update", task_ids=[ep.task_id for ep in episodes]
        )
    return selectors.unflatten_params(flat, params.input_dim, params.hidden, params.version + 1)


def meta_validate(params, tasks, k, rng: SeededRng, strategy: str = "medselect",
                  greedy: bool = False) -> float:
    """Mean reward over validation tasks under a fixed derived seed."""
    rewards = []
    for task in tasks:
        pool = selectors.pool_view(task)
        if greedy:
            forward = (
                selectors.medselect_forward
                if strategy == "medselect"
                else selectors.clinical_forward
            )
            logits = forward(params, pool)
            indices = np.argsort(-logits, kind="stable")[:k]
        else:
            indices = selectors.select(
                strategy, params, pool, k, rng.child("val", task.task_id, "select")
            ).indices
        rewards.append(_reward(task, pool, indices))
    return math.fsum(rewards) / len(rewards)


@dataclass
class TrainResult:
    best_params: object
    final_params: object
    adam: AdamState
    best_val: float
    best_step: int
    records: list


def train(config: TrainConfig, split, strategy: str, input_dim: int,
          log_path=None, dump_dir=None) -> TrainResult:
    """Full meta-training loop; returns best and final parameters.

    The JSONL training log carries per-update batch statistics and the
    periodic validation rewards; wall-clock timing goes to the stderr
    logger only so logs from identical runs are byte-identical.
    """
    config.validate()
    if strategy not in selectors.TRAINABLE:
        raise ConfigError(f"strategy {strategy!r} is not trainable")
    if not split.meta_train or not split.meta_val:
        raise ConfigError("training needs non-empty meta-train and meta-val")
    for task in split.meta_train:
        if config.k > task.n_pool:
            raise ConfigError(f"k={config.k} exceeds pool size {task.n_pool}")

    rng = SeededRng(config.seed)
    params = selectors.init_params(input_dim, config.hidden, rng.child("init", strategy))
    adam = init_adam(selectors.n_params(input_dim, config.hidden))
    records = []
    log_file = open(log_path, "w") if log_path else None

    def emit(record):
        records.append(record)
        if log_file:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

    def validate(step):
        val = meta_validate(
            params, split.meta_val, config.k, rng, strategy, config.greedy_validation
        )
        log.info("step %d: val_reward=%.4f", step, val)
        return val

    try:
        best_val = validate(0)
        best_step, best_params = 0, replace(params)
        emit({"step": 0, "val_reward": best_val})
        step = 0
        n_batches = math.ceil(len(split.meta_train) / config.batch_size)
        for epoch in range(config.epochs):
            order = rng.child("shuffle", epoch).permutation(len(split.meta_train))
            for bi in range(n_batches):
                batch_ids = order[bi * config.batch_size : (bi + 1) * config.batch_size]
                episodes = []
                for ti in batch_ids:
                    task = split.meta_train[int(ti)]
                    episodes.append(
                        run_episode(
                            params,
                            task,
                            config.k,
                            rng.child("episode", epoch, task.task_id),
                            strategy,
                            config.baseline_draws,
                        )
                    )
                params = policy_gradient_step(params, adam, episodes, config, strategy)
                step += 1
                record = {
                    "step": step,
                    "epoch": epoch,
                    "mean_R": math.fsum(e.reward for e in episodes) / len(episodes),
                    "mean_b": math.fsum(e.baseline for e in episodes) / len(episodes),
                    "mean_adv": math.fsum(e.advantage for e in episodes) / len(episodes),
                }
                if step % config.val_every == 0:
                    record["val_reward"] = validate(step)
                    if record["val_reward"] > best_val:
                        best_val, best_step = record["val_reward"], step
                        best_params = replace(params)
                emit(record)
        if step % config.val_every != 0 and config.epochs > 0:
            final_val = validate(step)
            emit({"step": step, "val_reward": final_val})
            if final_val > best_val:
                best_val, best_step, best_params = final_val, step, replace(params)
    except NumericalAbort as e:
        if dump_dir is not None:
            selectors.save_checkpoint(params, f"{dump_dir}/abort_params.selw1")
            with open(f"{dump_dir}/abort_batch.json", "w") as f:
                json.dump({"task_ids": e.task_ids, "error": str(e)}, f, sort_keys=True)
        raise
    finally:
        if log_file:
            log_file.close()
    return TrainResult(
        best_params=best_params,
        final_params=params,
        adam=adam,
        best_val=best_val,
        best_step=best_step,
        records=records,
    )
