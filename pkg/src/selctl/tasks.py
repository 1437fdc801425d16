"""Episode construction: item stores, synthetic data, and holdout splits.

An episode ("task") is a binary classification problem: a condition c,
an unlabeled pool U whose labels are hidden behind a labeling oracle,
and a labeled query set Q used only for scoring.  Pools and queries are
class-balanced.  Splits hold out a set of conditions from meta-training
so generalization can be measured on unseen conditions; half of the
meta-test tasks use holdout conditions.

Items come either from a synthetic generator (Gaussian condition
clusters plus a shared No-Finding cluster, with a configurable fraction
of items whose embeddings are replaced by isotropic noise) or from a
binary embedding file (format documented at save_store).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .numerics import SeededRng

NOFINDING = "No Finding"

MAGIC = b"SELX1"
_HEADER = np.dtype([("d", "<u4"), ("n_items", "<u4"), ("n_conditions", "<u4")])


def _record_dtype(d: int) -> np.dtype:
    return np.dtype(
        [
            ("item_id", "<u8"),
            ("label", "u1"),
            ("age", "<f4"),
            ("sex", "u1"),
            ("laterality", "u1"),
            ("condition_id", "<u4"),
            ("embedding", "<f4", (d,)),
        ]
    )


@dataclass(frozen=True)
class ClinicalFeatures:
    """Per-item metadata: age in years, sex (female=1), laterality (frontal=1)."""

    age: float
    sex: int
    laterality: int


@dataclass(frozen=True)
class LabeledEmbedding:
    item_id: int
    embedding: np.ndarray
    label: int
    clinical: ClinicalFeatures
    condition: str


@dataclass
class ItemStore:
    """Read-only column store of labeled embeddings.

    ``conditions[condition_ids[i]]`` names item i's condition; negatives
    carry label 0.  ``corrupted`` is generator metadata only and is not
    persisted to disk.
    """

    conditions: list
    item_ids: np.ndarray
    embeddings: np.ndarray
    labels: np.ndarray
    ages: np.ndarray
    sexes: np.ndarray
    lateralities: np.ndarray
    condition_ids: np.ndarray
    corrupted: np.ndarray | None = None

    def __len__(self):
        return int(self.item_ids.shape[0])

    @property
    def d(self) -> int:
        return int(self.embeddings.shape[1])

    def get(self, row: int) -> LabeledEmbedding:
        return LabeledEmbedding(
            item_id=int(self.item_ids[row]),
            embedding=self.embeddings[row],
            label=int(self.labels[row]),
            clinical=ClinicalFeatures(
                age=float(self.ages[row]),
                sex=int(self.sexes[row]),
                laterality=int(self.lateralities[row]),
            ),
            condition=self.conditions[int(self.condition_ids[row])],
        )

    def validate(self):
        n = len(self)
        if self.embeddings.shape != (n, self.d) or self.d < 2:
            raise DataError(f"bad embedding block shape {self.embeddings.shape}")
        if not np.all(np.isfinite(self.embeddings)):
            bad = int(np.argwhere(~np.all(np.isfinite(self.embeddings), axis=1))[0, 0])
            raise DataError(f"non-finite embedding at item index {bad}")
        for name, arr, lo, hi in (
            ("label", self.labels, 0, 1),
            ("sex", self.sexes, 0, 1),
            ("laterality", self.lateralities, 0, 1),
            ("age", self.ages, 0.0, 120.0),
        ):
            if np.any(arr < lo) or np.any(arr > hi):
                bad = int(np.argwhere((arr < lo) | (arr > hi))[0, 0])
                raise DataError(f"{name} out of range at item index {bad}")
        if np.any(self.condition_ids < 0) or np.any(
            self.condition_ids >= len(self.conditions)
        ):
            raise DataError("condition_id out of range")
        if len(np.unique(self.item_ids)) != n:
            raise DataError("duplicate item_id")
        return self


def save_store(store: ItemStore, path, extra_meta=None):
    """Write the binary item file plus a sibling .meta.json.

    Binary layout, little-endian: magic "SELX1"; header {u32 d, u32
    n_items, u32 n_conditions}; then per item {u64 item_id, u8 label,
    f32 age, u8 sex, u8 laterality, u32 condition_id, d x f32 embedding}.
    Condition names and provenance live in the sibling JSON.
    """
    store.validate()
    n, d = len(store), store.d
    header = np.zeros(1, dtype=_HEADER)
    header["d"], header["n_items"], header["n_conditions"] = d, n, len(store.conditions)
    rec = np.zeros(n, dtype=_record_dtype(d))
    rec["item_id"] = store.item_ids
    rec["label"] = store.labels
    rec["age"] = store.ages
    rec["sex"] = store.sexes
    rec["laterality"] = store.lateralities
    rec["condition_id"] = store.condition_ids
    rec["embedding"] = store.embeddings
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.tobytes())
        f.write(rec.tobytes())
    meta = {"conditions": list(store.conditions), "d": d, "n_items": n}
    if extra_meta:
        meta.update(extra_meta)
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_embedding_file(path) -> ItemStore:
    """Load and validate a binary item file written by save_store."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad magic, not an embedding file")
    off = len(MAGIC)
    if len(blob) < off + _HEADER.itemsize:
        raise DataError(f"{path}: truncated header")
    header = np.frombuffer(blob, dtype=_HEADER, count=1, offset=off)[0]
    d, n, n_cond = int(header["d"]), int(header["n_items"]), int(header["n_conditions"])
    if d < 2:
        raise DataError(f"{path}: embedding dimension {d} too small")
    rdt = _record_dtype(d)
    expected = off + _HEADER.itemsize + n * rdt.itemsize
    if len(blob) != expected:
        raise DataError(
            f"{path}: size mismatch, expected {expected} bytes got {len(blob)}"
        )
    rec = np.frombuffer(blob, dtype=rdt, count=n, offset=off + _HEADER.itemsize)
    meta_path = str(path) + ".meta.json"
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        conditions = list(meta.get("conditions", []))
        if len(conditions) != n_cond:
            raise DataError(
                f"{path}: header declares {n_cond} conditions, meta lists {len(conditions)}"
            )
    else:
        conditions = [f"c{i}" for i in range(n_cond)]
    store = ItemStore(
        conditions=conditions,
        item_ids=rec["item_id"].astype(np.int64),
        embeddings=rec["embedding"].astype(np.float64),
        labels=rec["label"].astype(np.int8),
        ages=rec["age"].astype(np.float64),
        sexes=rec["sex"].astype(np.int8),
        lateralities=rec["laterality"].astype(np.int8),
        condition_ids=rec["condition_id"].astype(np.int64),
    )
    return store.validate()


@dataclass
class SynthConfig:
    """Synthetic world parameters.

    Positives for each condition are drawn from a Gaussian cluster at
    that condition's mean direction; negatives come from the shared
    No-Finding cluster.  A ``corrupt_frac`` fraction of items have their
    embedding replaced by isotropic noise centred ``corrupt_shift`` away
    from the clean clusters (the label is kept), mimicking how off-
    protocol images occupy their own region of an embedding space.
    Selecting corrupted items drags the class prototypes toward that
    region, so which items get labeled matters.  Laterality and age are
    correlated with corruption, which gives the clinical-features
    selector a usable signal and makes selection composition measurable
    downstream.
    """

    d: int = 16
    conditions: tuple = ("c0", "c1")
    positives_per_condition: int = 600
    n_nofinding: int = 1800
    mean_scale: float = 16.0
    cluster_std: float = 4.0
    nofinding_std: float = 4.0
    corrupt_frac: float = 0.5
    corrupt_shift: float = 72.0
    noise_std: float = 16.0
    frontal_prob_clean: float = 0.95
    frontal_prob_corrupted: float = 0.05
    female_prob: float = 0.45
    age_mean_clean: float = 45.0
    age_mean_corrupted: float = 62.0
    age_std: float = 15.0

    def validate(self):
        if self.d < 2:
            raise ConfigError(f"embedding dimension must be >= 2, got {self.d}")
        if not self.conditions:
            raise ConfigError("need at least one condition")
        if len(set(self.conditions)) != len(self.conditions):
            raise ConfigError("condition names must be unique")
        if NOFINDING in self.conditions:
            raise ConfigError(f"condition name {NOFINDING!r} is reserved")
        if self.positives_per_condition < 1 or self.n_nofinding < 1:
            raise ConfigError("item counts must be positive")
        for name in ("cluster_std", "nofinding_std", "noise_std", "age_std"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.mean_scale < 0:
            raise ConfigError("mean_scale must be >= 0")
        if self.corrupt_shift < 0:
            raise ConfigError("corrupt_shift must be >= 0")
        for name in (
            "corrupt_frac",
            "frontal_prob_clean",
            "frontal_prob_corrupted",
            "female_prob",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.age_mean_clean <= 115.0 or not 0.0 <= self.age_mean_corrupted <= 115.0:
            raise ConfigError("age means must be in [0, 115]")
        return self


def _unit_directions(d: int, count: int, rng: SeededRng) -> np.ndarray:
    """Deterministic cluster mean directions, orthonormal when count <= d."""
    g = rng.normal(size=(d, count))
    if count <= d:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))[np.newaxis, :]
        return q.T.copy()
    norms = np.linalg.norm(g, axis=0)
    return (g / norms).T.copy()


def generate_synthetic_dataset(config: SynthConfig, rng: SeededRng) -> ItemStore:
    """Build an ItemStore from the synthetic world.

    All embeddings and ages are quantized to float32 so a saved store
    round-trips bit-exactly through the binary format.
    """
    config.validate()
    conditions = [NOFINDING] + list(config.conditions)
    # one extra direction reserved for the corruption cluster centre
    dirs = _unit_directions(config.d, len(conditions) + 1, rng.child("directions"))
    means = config.mean_scale * dirs[:-1]
    corrupt_center = config.corrupt_shift * dirs[-1]

    blocks = []
    for cid, name in enumerate(conditions):
        n = config.n_nofinding if name == NOFINDING else config.positives_per_condition
        std = config.nofinding_std if name == NOFINDING else config.cluster_std
        r = rng.child("gen", name)
        corrupted = r.uniforms(n) < config.corrupt_frac
        emb = means[cid] + std * r.normal(size=(n, config.d))
        noise = corrupt_center + config.noise_std * r.normal(size=(n, config.d))
        emb[corrupted] = noise[corrupted]
        frontal_prob = np.where(
            corrupted, config.frontal_prob_corrupted, config.frontal_prob_clean
        )
        laterality = (r.uniforms(n) < frontal_prob).astype(np.int8)
        sex = (r.uniforms(n) < config.female_prob).astype(np.int8)
        age_mean = np.where(corrupted, config.age_mean_corrupted, config.age_mean_clean)
        age = np.clip(age_mean + config.age_std * r.normal(size=n), 0.0, 115.0)
        blocks.append(
            (
                emb.astype(np.float32).astype(np.float64),
                np.full(n, 0 if name == NOFINDING else 1, dtype=np.int8),
                age.astype(np.float32).astype(np.float64),
                sex,
                laterality,
                np.full(n, cid, dtype=np.int64),
                corrupted,
            )
        )

    cat = lambda i: np.concatenate([b[i] for b in blocks])
    n_total = sum(b[0].shape[0] for b in blocks)
    store = ItemStore(
        conditions=conditions,
        item_ids=np.arange(n_total, dtype=np.int64),
        embeddings=cat(0),
        labels=cat(1),
        ages=cat(2),
        sexes=cat(3),
        lateralities=cat(4),
        condition_ids=cat(5),
        corrupted=cat(6),
    )
    return store.validate()


@dataclass
class Task:
    """One episode: condition, unlabeled pool, labeled query set.

    ``pool_rows`` is stored in the fixed per-task presentation order the
    sequence selectors consume; selection outcomes index into it.  Pool
    labels are only reachable through ``labeling_oracle``, which counts
    every reveal so label access is auditable.
    """

    task_id: int
    split: str
    condition: str
    condition_id: int
    holdout: bool
    pool_rows: np.ndarray
    query_rows: np.ndarray
    store: ItemStore = field(repr=False)
    reveal_count: int = 0

    @property
    def n_pool(self) -> int:
        return int(self.pool_rows.shape[0])

    @property
    def n_query(self) -> int:
        return int(self.query_rows.shape[0])

    def pool_embeddings(self) -> np.ndarray:
        return self.store.embeddings[self.pool_rows]

    def pool_clinical(self) -> np.ndarray:
        """(N, 3) array of raw (age, sex, laterality) per pool item."""
        s = self.store
        return np.stack(
            [
                s.ages[self.pool_rows],
                s.sexes[self.pool_rows].astype(np.float64),
                s.lateralities[self.pool_rows].astype(np.float64),
            ],
            axis=1,
        )

    def pool_item_ids(self) -> np.ndarray:
        return self.store.item_ids[self.pool_rows]

    def query_item_ids(self) -> np.ndarray:
        return self.store.item_ids[self.query_rows]

    def query_embeddings(self) -> np.ndarray:
        return self.store.embeddings[self.query_rows]

    def query_labels(self) -> np.ndarray:
        return self.store.labels[self.query_rows].astype(np.int64)

    def labeling_oracle(self, indices) -> np.ndarray:
        """Reveal labels for the given pool positions (the only label path)."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            return np.zeros(0, dtype=np.int64)
        if np.any(indices < 0) or np.any(indices >= self.n_pool):
            raise DataError(f"task {self.task_id}: pool index out of range")
        self.reveal_count += int(indices.size)
        return self.store.labels[self.pool_rows[indices]].astype(np.int64)


@dataclass
class EpisodeSplit:
    meta_train: list
    meta_val: list
    meta_test: list
    holdout_conditions: set

    def all_tasks(self):
        return list(self.meta_train) + list(self.meta_val) + list(self.meta_test)


def _partition_rows(rows: np.ndarray, rng: SeededRng) -> tuple:
    """Disjoint near-equal thirds (train, val, test) of a row set."""
    perm = rng.permutation(rows.shape[0])
    shuffled = rows[perm]
    third = rows.shape[0] // 3
    return (
        np.sort(shuffled[: rows.shape[0] - 2 * third]),
        np.sort(shuffled[rows.shape[0] - 2 * third : rows.shape[0] - third]),
        np.sort(shuffled[rows.shape[0] - third :]),
    )


def build_split(
    store: ItemStore,
    counts,
    holdouts,
    rng: SeededRng,
    balance: float = 0.5,
    n_pool: int = 100,
    n_query: int = 100,
) -> EpisodeSplit:
    """Construct disjoint meta-train/val/test task collections.

    Item rows are partitioned across splits first (holdout-condition
    positives go entirely to meta-test), then each task draws its pool
    and query from its split's rows, so no item appears in two splits.
    Half of the meta-test tasks use holdout conditions.
    """
    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 0:
        raise ConfigError("split counts must be non-negative")
    if not 0.0 < balance < 1.0:
        raise ConfigError(f"balance must be in (0, 1), got {balance}")
    holdouts = set(holdouts)
    known = set(store.conditions)
    if holdouts - known:
        raise ConfigError(f"unknown holdout conditions: {sorted(holdouts - known)}")
    if NOFINDING in holdouts:
        raise ConfigError(f"{NOFINDING!r} cannot be a holdout condition")
    positive_conditions = [
        c
        for c in store.conditions
        if c != NOFINDING
        and np.any((store.labels == 1) & (store.condition_ids == store.conditions.index(c)))
    ]
    nonholdout = [c for c in positive_conditions if c not in holdouts]
    holdout_list = [c for c in positive_conditions if c in holdouts]
    if not nonholdout:
        raise ConfigError("no non-holdout conditions with positive items")
    if n_test > 0 and holdouts and not holdout_list:
        raise DataError(f"holdout conditions have no positive items: {sorted(holdouts)}")

    n_pos_pool = math.ceil(balance * n_pool)
    n_pos_query = math.ceil(balance * n_query)
    need_pos = n_pos_pool + n_pos_query
    need_neg = (n_pool - n_pos_pool) + (n_query - n_pos_query)

    neg_rows = np.flatnonzero(store.labels == 0)
    part_neg = dict(
        zip(("train", "val", "test"), _partition_rows(neg_rows, rng.child("partition", "negatives")))
    )
    part_pos = {"train": {}, "val": {}, "test": {}}
    for c in positive_conditions:
        cid = store.conditions.index(c)
        rows = np.flatnonzero((store.labels == 1) & (store.condition_ids == cid))
        if c in holdouts:
            part_pos["test"][c] = rows
        else:
            tr, va, te = _partition_rows(rows, rng.child("partition", "positives", c))
            part_pos["train"][c], part_pos["val"][c], part_pos["test"][c] = tr, va, te

    def make_task(task_id, split, cond, holdout_flag, r):
        pos_avail = part_pos[split].get(cond, np.zeros(0, dtype=np.int64))
        neg_avail = part_neg[split]
        if pos_avail.shape[0] < need_pos:
            raise DataError(
                f"split {split!r}: condition {cond!r} has {pos_avail.shape[0]} "
                f"positives, need {need_pos} per task"
            )
        if neg_avail.shape[0] < need_neg:
            raise DataError(
                f"split {split!r}: {neg_avail.shape[0]} negatives available, "
                f"need {need_neg} per task"
            )
        pos_take = pos_avail[r.permutation(pos_avail.shape[0])[:need_pos]]
        neg_take = neg_avail[r.permutation(neg_avail.shape[0])[:need_neg]]
        pool = np.concatenate([pos_take[:n_pos_pool], neg_take[: n_pool - n_pos_pool]])
        query = np.concatenate([pos_take[n_pos_pool:], neg_take[n_pool - n_pos_pool :]])
        pool = pool[r.permutation(n_pool)]
        query = query[r.permutation(n_query)]
        return Task(
            task_id=task_id,
            split=split,
            condition=cond,
            condition_id=store.conditions.index(cond),
            holdout=holdout_flag,
            pool_rows=pool,
            query_rows=query,
            store=store,
        )

    tasks = {"train": [], "val": [], "test": []}
    next_id = 0
    for split, count in (("train", n_train), ("val", n_val)):
        for i in range(count):
            r = rng.child("task", split, i)
            cond = nonholdout[int(r.integers(len(nonholdout)))]
            tasks[split].append(make_task(next_id, split, cond, False, r))
            next_id += 1
    n_holdout_tasks = n_test // 2 if holdout_list else 0
    for i in range(n_test):
        r = rng.child("task", "test", i)
        is_holdout = i >= n_test - n_holdout_tasks
        pick_from = holdout_list if is_holdout else nonholdout
        cond = pick_from[int(r.integers(len(pick_from)))]
        tasks["test"].append(make_task(next_id, "test", cond, is_holdout, r))
        next_id += 1

    return EpisodeSplit(
        meta_train=tasks["train"],
        meta_val=tasks["val"],
        meta_test=tasks["test"],
        holdout_conditions=set(holdout_list),
    )


def write_task_manifest(split: EpisodeSplit, path):
    """One JSON line per task: condition, split, holdout flag, item ids."""
    with open(path, "w") as f:
        for task in split.all_tasks():
            line = {
                "task_id": task.task_id,
                "split": task.split,
                "condition": task.condition,
                "holdout": task.holdout,
                "pool_item_ids": [int(x) for x in task.pool_item_ids()],
                "query_item_ids": [int(x) for x in task.query_item_ids()],
            }
            f.write(json.dumps(line, sort_keys=True) + "\n")


def read_task_manifest(path, store: ItemStore) -> EpisodeSplit:
    """Rebuild an EpisodeSplit from a manifest against its item store."""
    row_of = {int(item_id): row for row, item_id in enumerate(store.item_ids)}
    tasks = {"train": [], "val": [], "test": []}
    holdout_conditions = set()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            try:
                pool = np.array([row_of[i] for i in obj["pool_item_ids"]], dtype=np.int64)
                query = np.array([row_of[i] for i in obj["query_item_ids"]], dtype=np.int64)
            except KeyError as e:
                raise DataError(f"{path}: manifest references unknown item_id {e}")
            if obj["condition"] not in store.conditions:
                raise DataError(f"{path}: unknown condition {obj['condition']!r}")
            task = Task(
                task_id=int(obj["task_id"]),
                split=obj["split"],
                condition=obj["condition"],
                condition_id=store.conditions.index(obj["condition"]),
                holdout=bool(obj["holdout"]),
                pool_rows=pool,
                query_rows=query,
                store=store,
            )
            if task.split not in tasks:
                raise DataError(f"{path}: unknown split {task.split!r}")
            tasks[task.split].append(task)
            if task.holdout:
                holdout_conditions.add(task.condition)
    return EpisodeSplit(
        meta_train=tasks["train"],
        meta_val=tasks["val"],
        meta_test=tasks["test"],
        holdout_conditions=holdout_conditions,
    )
