"""Pipeline stages behind the CLI: generate, train, evaluate, analyze.

All stages operate on one run directory: the dataset and task manifest
at its root, checkpoints/ and logs/ from training, reports/ from
evaluation and analysis.  Every artifact embeds {tool_version,
config_hash, seed} (binary formats via a sibling .meta.json), and
artifacts derived from a dataset record its sha256 so later stages can
refuse mismatched inputs.  All writers are deterministic: re-running a
stage with the same config and seed reproduces every output byte for
byte, independent of --workers (per-task work uses derived seed
streams and results are reduced in fixed task order).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os

import numpy as np

from . import __version__, analysis, selectors, tasks, trainer
from .errors import ConfigError, DataError
from .numerics import SeededRng

log = logging.getLogger("selctl.experiment")

# ---------------------------------------------------------------------------
# configuration

_SYNTH_DEFAULTS = dataclasses.asdict(tasks.SynthConfig())
_SYNTH_DEFAULTS["conditions"] = list(_SYNTH_DEFAULTS["conditions"])

DEFAULTS = {
    "seed": 0,
    "data_dir": None,
    "synth": _SYNTH_DEFAULTS,
    "split": {
        "train_tasks": 600,
        "val_tasks": 100,
        "test_tasks": 200,
        "holdouts": ["c1"],
        "balance": 0.5,
        "n_pool": 100,
        "n_query": 100,
    },
    "train": {
        "strategy": "medselect",
        "k": 10,
        "hidden": 256,
        "learning_rate": 1e-4,
        "batch_size": 64,
        "epochs": 5,
        "val_every": 10,
        "baseline_draws": 8,
        "grad_clip_norm": 0.0,
        "greedy_validation": False,
    },
    "evaluate": {
        "strategies": ["medselect", "kmedoids", "random"],
        "k_list": [5, 10, 20, 40],
        "checkpoints": {"medselect": "checkpoints/medselect_best.selw1"},
    },
    "analyze": {
        "strategies": ["medselect", "kmedoids", "random"],
        "k": 10,
        "n_resamples": 10000,
        "reference": "medselect",
        "checkpoints": {"medselect": "checkpoints/medselect_best.selw1"},
    },
}

# config subtrees whose keys are free-form (strategy name -> path)
_FREE_KEY_PATHS = {("evaluate", "checkpoints"), ("analyze", "checkpoints")}


def _check_type(path: str, value, default):
    if default is None:
        ok = value is None or isinstance(value, str)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {path!r}: expected {type(default).__name__}, got {value!r}")


def validate_config(cfg: dict, defaults=None, prefix=()):
    """Reject unknown keys and grossly wrong types, recursively."""
    defaults = DEFAULTS if defaults is None else defaults
    if not isinstance(cfg, dict):
        raise ConfigError(f"config section {'.'.join(prefix) or '<root>'} must be an object")
    for key, value in cfg.items():
        path = prefix + (key,)
        dotted = ".".join(path)
        if prefix in _FREE_KEY_PATHS:
            if not isinstance(value, str):
                raise ConfigError(f"config key {dotted!r}: checkpoint paths must be strings")
            continue
        if key not in defaults:
            raise ConfigError(f"unknown config key {dotted!r}")
        default = defaults[key]
        if isinstance(default, dict):
            validate_config(value, default, path)
        else:
            _check_type(dotted, value, default)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def effective_config(config_path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        try:
            with open(config_path) as f:
                file_cfg = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}")
        validate_config(file_cfg)
        cfg = deep_merge(cfg, file_cfg)
    if overrides:
        validate_config(overrides)
        cfg = deep_merge(cfg, overrides)
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


def provenance(cfg: dict) -> dict:
    return {"tool_version": __version__, "config_hash": config_hash(cfg), "seed": cfg["seed"]}


# ---------------------------------------------------------------------------
# artifact helpers

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _refuse_existing(path, force: bool):
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite")


def _run_paths(out: str) -> dict:
    return {
        "dataset": os.path.join(out, "dataset.selx1"),
        "manifest": os.path.join(out, "tasks.jsonl"),
        "checkpoints": os.path.join(out, "checkpoints"),
        "logs": os.path.join(out, "logs"),
        "reports": os.path.join(out, "reports"),
    }


# ---------------------------------------------------------------------------
# stages

def run_generate(cfg: dict, out: str, force: bool = False, workers: int = 1):
    """Synthesize the dataset and task manifest into the run directory."""
    os.makedirs(out, exist_ok=True)
    p = _run_paths(out)
    _refuse_existing(p["dataset"], force)
    _refuse_existing(p["manifest"], force)
    synth_kwargs = dict(cfg["synth"])
    synth_kwargs["conditions"] = tuple(synth_kwargs["conditions"])
    synth = tasks.SynthConfig(**synth_kwargs).validate()
    sc = cfg["split"]
    rng = SeededRng(cfg["seed"])
    store = tasks.generate_synthetic_dataset(synth, rng.child("dataset"))
    split = tasks.build_split(
        store,
        (sc["train_tasks"], sc["val_tasks"], sc["test_tasks"]),
        set(sc["holdouts"]),
        rng.child("split"),
        balance=sc["balance"],
        n_pool=sc["n_pool"],
        n_query=sc["n_query"],
    )
    tasks.save_store(store, p["dataset"], extra_meta=provenance(cfg))
    tasks.write_task_manifest(split, p["manifest"])
    write_json(
        p["manifest"] + ".meta.json",
        {**provenance(cfg), "dataset_sha256": file_sha256(p["dataset"]), "split": sc},
    )
    log.info(
        "generated %d items, %d/%d/%d tasks into %s",
        len(store), len(split.meta_train), len(split.meta_val), len(split.meta_test), out,
    )
    return store, split


def load_run_data(cfg: dict, out: str):
    """Load (store, split, dataset_sha256) for a run directory."""
    root = cfg.get("data_dir") or out
    p = _run_paths(root)
    for path in (p["dataset"], p["manifest"]):
        if not os.path.exists(path):
            raise DataError(f"{path} not found; run the generate stage first")
    store = tasks.load_embedding_file(p["dataset"])
    split = tasks.read_task_manifest(p["manifest"], store)
    sha = file_sha256(p["dataset"])
    meta_path = p["manifest"] + ".meta.json"
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        if meta.get("dataset_sha256") not in (None, sha):
            raise DataError(f"{p['dataset']} does not match the manifest's dataset hash")
    return store, split, sha


def _load_strategy_params(cfg, out, strategies, checkpoints, store, dataset_sha):
    """Checkpointed parameters for each trainable strategy in the list."""
    params_by = {}
    for s in strategies:
        if s not in selectors.STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
        if s not in selectors.TRAINABLE:
            continue
        rel = checkpoints.get(s)
        if rel is None:
            raise ConfigError(f"no checkpoint configured for trainable strategy {s!r}")
        path = rel if os.path.isabs(rel) else os.path.join(out, rel)
        if not os.path.exists(path):
            raise DataError(f"checkpoint for {s!r} not found: {path}")
        params = selectors.load_checkpoint(path)
        meta_path = path + ".meta.json"
        if os.path.exists(meta_path):
            with open(meta_path) as f:
                meta = json.load(f)
            trained_on = meta.get("dataset_sha256")
            if trained_on is not None and trained_on != dataset_sha:
                raise DataError(
                    f"checkpoint {path} was trained on a different dataset "
                    f"({trained_on[:12]}... vs {dataset_sha[:12]}...)"
                )
        expected_dim = store.d if s == "medselect" else 3
        if params.input_dim != expected_dim:
            raise DataError(
                f"checkpoint {path} expects input dim {params.input_dim}, "
                f"dataset gives {expected_dim}"
            )
        params_by[s] = params
    return params_by


def run_train(cfg: dict, out: str, force: bool = False, workers: int = 1):
    """Train one trainable strategy; write checkpoints, optimizer state, log."""
    store, split, dataset_sha = load_run_data(cfg, out)
    tc_cfg = cfg["train"]
    strategy = tc_cfg["strategy"]
    if strategy not in selectors.TRAINABLE:
        raise ConfigError(f"strategy {strategy!r} is not trainable")
    tconf = trainer.TrainConfig(
        k=tc_cfg["k"],
        learning_rate=tc_cfg["learning_rate"],
        batch_size=tc_cfg["batch_size"],
        epochs=tc_cfg["epochs"],
        val_every=tc_cfg["val_every"],
        hidden=tc_cfg["hidden"],
        baseline_draws=tc_cfg["baseline_draws"],
        grad_clip_norm=tc_cfg["grad_clip_norm"],
        greedy_validation=tc_cfg["greedy_validation"],
        seed=cfg["seed"],
    ).validate()
    p = _run_paths(out)
    os.makedirs(p["checkpoints"], exist_ok=True)
    os.makedirs(p["logs"], exist_ok=True)
    best_path = os.path.join(p["checkpoints"], f"{strategy}_best.selw1")
    final_path = os.path.join(p["checkpoints"], f"{strategy}_final.selw1")
    adam_path = os.path.join(p["checkpoints"], f"{strategy}_final.sela1")
    log_path = os.path.join(p["logs"], f"train_{strategy}.jsonl")
    for path in (best_path, final_path, adam_path, log_path):
        _refuse_existing(path, force)

    input_dim = store.d if strategy == "medselect" else 3
    result = trainer.train(
        tconf, split, strategy, input_dim, log_path=log_path, dump_dir=p["logs"]
    )
    meta = {
        **provenance(cfg),
        "dataset_sha256": dataset_sha,
        "strategy": strategy,
        "best_val": result.best_val,
        "best_step": result.best_step,
    }
    selectors.save_checkpoint(result.best_params, best_path, extra_meta=meta)
    selectors.save_checkpoint(result.final_params, final_path, extra_meta=meta)
    trainer.save_adam(result.adam, adam_path)
    write_json(log_path + ".meta.json", meta)
    log.info("trained %s: best val %.4f at step %d", strategy, result.best_val, result.best_step)
    return result


# evaluation work shared with forked workers (set before the pool is created)
_EVAL_CTX = None


def _eval_one(item):
    k, strategy, task_index = item
    ctx = _EVAL_CTX
    task = ctx["tests"][task_index]
    rng = SeededRng(ctx["seed"]).child("evaluate", strategy, int(k), task.task_id)
    result = trainer.run_episode(
        ctx["params_by"].get(strategy), task, int(k), rng, strategy, baseline_draws=0
    )
    return {
        "k": int(k),
        "strategy": strategy,
        "task_id": task.task_id,
        "condition": task.condition,
        "holdout": task.holdout,
        "reward": result.reward,
    }


def ordered_parallel_map(fn, items, workers: int = 1):
    """Map preserving item order; results do not depend on worker count."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    import multiprocessing
    from concurrent.futures import ProcessPoolExecutor

    try:
        ctx = multiprocessing.get_context("fork")
    except ValueError:
        log.warning("fork unavailable; evaluating sequentially")
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


def run_evaluate(cfg: dict, out: str, force: bool = False, workers: int = 1):
    """Per-task rewards for every strategy and K over meta-test."""
    global _EVAL_CTX
    store, split, dataset_sha = load_run_data(cfg, out)
    ecfg = cfg["evaluate"]
    strategies = list(ecfg["strategies"])
    k_list = [int(k) for k in ecfg["k_list"]]
    if not strategies or not k_list:
        raise ConfigError("evaluate needs at least one strategy and one k")
    if not split.meta_test:
        raise DataError("no meta-test tasks in the manifest")
    n_pool = split.meta_test[0].n_pool
    for k in k_list:
        if not 0 < k <= n_pool:
            raise ConfigError(f"k={k} out of range for pool size {n_pool}")
    params_by = _load_strategy_params(
        cfg, out, strategies, ecfg["checkpoints"], store, dataset_sha
    )
    p = _run_paths(out)
    os.makedirs(p["reports"], exist_ok=True)
    rewards_path = os.path.join(p["reports"], "rewards.csv")
    summary_path = os.path.join(p["reports"], "summary.csv")
    _refuse_existing(rewards_path, force)
    _refuse_existing(summary_path, force)

    items = [
        (k, s, ti)
        for k in k_list
        for s in strategies
        for ti in range(len(split.meta_test))
    ]
    _EVAL_CTX = {
        "tests": split.meta_test,
        "params_by": params_by,
        "seed": cfg["seed"],
    }
    try:
        rows = ordered_parallel_map(_eval_one, items, workers)
    finally:
        _EVAL_CTX = None

    write_csv(
        rewards_path,
        ["k", "strategy", "task_id", "condition", "holdout", "reward"],
        rows,
    )
    rng = SeededRng(cfg["seed"])
    summary_rows = []
    for k in k_list:
        for s in strategies:
            sub = [r for r in rows if r["k"] == k and r["strategy"] == s]
            for subset in ("all", "nonholdout", "holdout"):
                if subset == "all":
                    vals = [r["reward"] for r in sub]
                else:
                    vals = [r["reward"] for r in sub if r["holdout"] == (subset == "holdout")]
                if not vals:
                    continue
                lo, hi = analysis.bootstrap_ci(
                    np.array(vals), rng.child("summary_ci", int(k), s, subset)
                )
                summary_rows.append(
                    {
                        "k": k,
                        "strategy": s,
                        "subset": subset,
                        "n_tasks": len(vals),
                        "mean_reward": math.fsum(vals) / len(vals),
                        "ci_lo": lo,
                        "ci_hi": hi,
                    }
                )
    write_csv(
        summary_path,
        ["k", "strategy", "subset", "n_tasks", "mean_reward", "ci_lo", "ci_hi"],
        summary_rows,
    )
    meta = {**provenance(cfg), "dataset_sha256": dataset_sha, "strategies": strategies, "k_list": k_list}
    write_json(rewards_path + ".meta.json", meta)
    write_json(summary_path + ".meta.json", meta)
    log.info("evaluated %d episodes into %s", len(rows), rewards_path)
    return rows, summary_rows


def _read_rewards_csv(path, dataset_sha):
    if not os.path.exists(path):
        raise DataError(f"{path} not found; run the evaluate stage first")
    meta_path = path + ".meta.json"
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        recorded = meta.get("dataset_sha256")
        if recorded is not None and recorded != dataset_sha:
            raise DataError(f"{path} was computed against a different dataset; refusing")
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.append(
                {
                    "k": int(row["k"]),
                    "strategy": row["strategy"],
                    "task_id": int(row["task_id"]),
                    "reward": float(row["reward"]),
                }
            )
    return rows


def run_analyze(cfg: dict, out: str, force: bool = False, workers: int = 1):
    """Selection profiles, improvement CIs, t-tests, Wasserstein tables."""
    store, split, dataset_sha = load_run_data(cfg, out)
    acfg = cfg["analyze"]
    k = int(acfg["k"])
    strategies = list(acfg["strategies"])
    reference = acfg["reference"]
    if reference not in strategies:
        raise ConfigError(f"reference strategy {reference!r} not in analyze.strategies")
    if "random" not in strategies:
        raise ConfigError("analyze.strategies must include 'random' (Wasserstein baseline)")
    params_by = _load_strategy_params(
        cfg, out, strategies, acfg["checkpoints"], store, dataset_sha
    )
    p = _run_paths(out)
    rewards_rows = _read_rewards_csv(os.path.join(p["reports"], "rewards.csv"), dataset_sha)
    test_ids = {t.task_id for t in split.meta_test}
    rewards = {}
    for row in rewards_rows:
        if row["k"] == k and row["strategy"] in strategies:
            rewards.setdefault(row["strategy"], {})[row["task_id"]] = row["reward"]
    for s in strategies:
        if set(rewards.get(s, {})) != test_ids:
            raise DataError(
                f"rewards.csv lacks complete k={k} coverage for strategy {s!r}; "
                f"re-run evaluate with this k and strategy"
            )

    os.makedirs(p["reports"], exist_ok=True)
    report_path = os.path.join(p["reports"], "analysis.json")
    _refuse_existing(report_path, force)

    rng = SeededRng(cfg["seed"])
    profiles = {
        s: analysis.profile_selections(
            s, params_by.get(s), split.meta_test, k, rng.child("analyze", "profile", s)
        )
        for s in strategies
    }
    control = analysis.profile_selections(
        "random", None, split.meta_test, k, rng.child("analyze", "profile", "random_control")
    )
    report = analysis.compare(
        profiles,
        rewards,
        rng.child("analyze", "bootstrap"),
        reference=reference,
        control=control,
        n_resamples=int(acfg["n_resamples"]),
    )
    payload = {
        **provenance(cfg),
        "dataset_sha256": dataset_sha,
        "k": k,
        "report": report.to_dict(),
    }
    write_json(report_path, payload)
    write_csv(
        os.path.join(p["reports"], "analysis_ttests.csv"),
        ["feature", "strategy", "mean_reference", "mean_strategy", "t", "p", "dof"],
        report.ttests,
    )
    wrows = [dict(r) for r in report.wasserstein]
    for r in wrows:
        r.setdefault("p_vs_reference", "")
    write_csv(
        os.path.join(p["reports"], "analysis_wasserstein.csv"),
        ["distribution", "pair", "n_tasks", "mean_distance", "p_vs_reference"],
        wrows,
    )
    write_csv(
        os.path.join(p["reports"], "analysis_improvements.csv"),
        ["baseline", "subset", "n_tasks", "mean", "ci_lo", "ci_hi"],
        report.improvements,
    )
    log.info("analysis written to %s", report_path)
    return report
