"""Comparative analyses over meta-test selections.

For each strategy, a SelectionProfile records per-task composition
statistics of the selected items (frontal/female fractions, mean age,
pairwise L2 distances).  ``compare`` turns per-strategy profiles and
per-task rewards into one report: mean rewards split by holdout flag,
paired improvements of the reference strategy over each baseline with
seeded percentile-bootstrap confidence intervals, Welch t-tests on the
composition statistics (per-task aggregates, never pooled items), and
per-task Wasserstein distances of each strategy's age and pairwise-
distance distributions against the random baseline, including a
random-vs-random control run with a different seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import selectors
from .errors import DataError
from .metrics import pairwise_l2_stats, wasserstein1, welch_ttest
from .numerics import SeededRng


@dataclass
class SelectionRecord:
    task_id: int
    condition: str
    holdout: bool
    item_ids: np.ndarray
    frontal_fraction: float
    female_fraction: float
    mean_age: float
    pairwise_mean: float
    pairwise_max: float
    pairwise_sample: np.ndarray = field(repr=False)
    age_sample: np.ndarray = field(repr=False)


@dataclass
class SelectionProfile:
    strategy: str
    k: int
    records: list

    def by_task(self) -> dict:
        return {r.task_id: r for r in self.records}

    def task_ids(self):
        return frozenset(r.task_id for r in self.records)


def profile_selections(strategy: str, params, tasks, k: int, rng: SeededRng) -> SelectionProfile:
    """One composition record per task; labels are never touched."""
    records = []
    for task in tasks:
        pool = selectors.pool_view(task)
        outcome = selectors.select(strategy, params, pool, k, rng.child(task.task_id, "select"))
        rows = task.pool_rows[outcome.indices]
        store = task.store
        ages = store.ages[rows]
        if k >= 2:
            pmean, pmax, psample = pairwise_l2_stats(store.embeddings[rows])
        else:
            pmean, pmax, psample = 0.0, 0.0, np.zeros(0)
        records.append(
            SelectionRecord(
                task_id=task.task_id,
                condition=task.condition,
                holdout=task.holdout,
                item_ids=store.item_ids[rows],
                frontal_fraction=float(np.mean(store.lateralities[rows])),
                female_fraction=float(np.mean(store.sexes[rows])),
                mean_age=float(np.mean(ages)),
                pairwise_mean=pmean,
                pairwise_max=pmax,
                pairwise_sample=psample,
                age_sample=ages.astype(np.float64),
            )
        )
    return SelectionProfile(strategy=strategy, k=int(k), records=records)


def bootstrap_ci(values, rng: SeededRng, n_resamples: int = 10000, alpha: float = 0.05):
    """Seeded percentile bootstrap CI for the mean of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty sample")
    idx = rng.integers(0, values.size, size=(int(n_resamples), values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi)


_TTEST_FEATURES = (
    "frontal_fraction",
    "female_fraction",
    "mean_age",
    "pairwise_mean",
    "pairwise_max",
)

_SUBSETS = ("all", "nonholdout", "holdout")


def _subset_records(records, subset):
    if subset == "all":
        return records
    want = subset == "holdout"
    return [r for r in records if r.holdout == want]


def _safe_welch(a, b):
    """Welch t-test that degrades gracefully when both samples are constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.var(a, ddof=1) == 0.0 and np.var(b, ddof=1) == 0.0:
        same = float(np.mean(a)) == float(np.mean(b))
        return (0.0, 1.0, float(a.size + b.size - 2)) if same else (math.inf, 0.0, float(a.size + b.size - 2))
    return welch_ttest(a, b)


@dataclass
class ComparisonReport:
    reference: str
    rewards: list
    improvements: list
    ttests: list
    wasserstein: list
    n_resamples: int

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "rewards": self.rewards,
            "improvements": self.improvements,
            "ttests": self.ttests,
            "wasserstein": self.wasserstein,
            "n_resamples": self.n_resamples,
        }


def compare(
    profiles: dict,
    rewards: dict,
    rng: SeededRng,
    reference: str = "medselect",
    random_name: str = "random",
    control: SelectionProfile | None = None,
    n_resamples: int = 10000,
) -> ComparisonReport:
    """Build the full comparison report; see the module docstring."""
    if reference not in profiles:
        raise DataError(f"reference strategy {reference!r} has no profile")
    ids = None
    for name, prof in profiles.items():
        if ids is None:
            ids = prof.task_ids()
        elif prof.task_ids() != ids:
            raise DataError(f"profile {name!r} covers a different task set")
    for name, by_task in rewards.items():
        if frozenset(by_task) != ids:
            raise DataError(f"rewards for {name!r} cover a different task set")
    if control is not None and control.task_ids() != ids:
        raise DataError("control profile covers a different task set")

    order = sorted(ids)
    strategies = sorted(profiles)

    # holdout flags are task properties; read them off the reference profile
    ref_flags = {r.task_id: r.holdout for r in profiles[reference].records}

    reward_rows = []
    for name in sorted(rewards):
        for subset in _SUBSETS:
            tids = [
                t
                for t in order
                if subset == "all" or ref_flags[t] == (subset == "holdout")
            ]
            if not tids:
                continue
            mean = math.fsum(rewards[name][t] for t in tids) / len(tids)
            reward_rows.append(
                {"strategy": name, "subset": subset, "n_tasks": len(tids), "mean_reward": mean}
            )

    improvement_rows = []
    for other in strategies:
        if other == reference or reference not in rewards or other not in rewards:
            continue
        for subset in _SUBSETS:
            tids = [
                t
                for t in order
                if subset == "all" or ref_flags[t] == (subset == "holdout")
            ]
            if not tids:
                continue
            diffs = np.array([rewards[reference][t] - rewards[other][t] for t in tids])
            lo, hi = bootstrap_ci(diffs, rng.child("ci", other, subset), n_resamples)
            improvement_rows.append(
                {
                    "baseline": other,
                    "subset": subset,
                    "n_tasks": len(tids),
                    "mean": float(np.mean(diffs)),
                    "ci_lo": lo,
                    "ci_hi": hi,
                }
            )

    ttest_rows = []
    ref_records = sorted(profiles[reference].records, key=lambda r: r.task_id)
    for other in strategies:
        if other == reference:
            continue
        other_records = sorted(profiles[other].records, key=lambda r: r.task_id)
        for feature in _TTEST_FEATURES:
            a = [getattr(r, feature) for r in ref_records]
            b = [getattr(r, feature) for r in other_records]
            t, p, dof = _safe_welch(a, b)
            ttest_rows.append(
                {
                    "feature": feature,
                    "strategy": other,
                    "mean_reference": float(np.mean(a)),
                    "mean_strategy": float(np.mean(b)),
                    "t": t,
                    "p": p,
                    "dof": dof,
                }
            )

    wasserstein_rows = []
    if random_name in profiles:
        rand_by_task = profiles[random_name].by_task()
        kinds = [("age", "age_sample")]
        if profiles[reference].k >= 2:
            kinds.append(("pairwise_l2", "pairwise_sample"))
        dist_samples = {}
        for kind, attr in kinds:
            for name in strategies + (["random_control"] if control is not None else []):
                if name == random_name:
                    continue
                prof = control if name == "random_control" else profiles[name]
                recs = sorted(prof.records, key=lambda r: r.task_id)
                dists = np.array(
                    [
                        wasserstein1(getattr(r, attr), getattr(rand_by_task[r.task_id], attr))
                        for r in recs
                    ]
                )
                dist_samples[(kind, name)] = dists
        for kind, attr in kinds:
            ref_dists = dist_samples[(kind, reference)]
            for name in strategies + (["random_control"] if control is not None else []):
                if name == random_name:
                    continue
                dists = dist_samples[(kind, name)]
                row = {
                    "distribution": kind,
                    "pair": f"{name}-vs-{random_name}"
                    if name != "random_control"
                    else f"{random_name}-vs-{random_name}",
                    "n_tasks": int(dists.size),
                    "mean_distance": float(np.mean(dists)),
                }
                if name != reference:
                    t, p, dof = _safe_welch(ref_dists, dists)
                    row["p_vs_reference"] = p
                wasserstein_rows.append(row)

    return ComparisonReport(
        reference=reference,
        rewards=reward_rows,
        improvements=improvement_rows,
        ttests=ttest_rows,
        wasserstein=wasserstein_rows,
        n_resamples=int(n_resamples),
    )
