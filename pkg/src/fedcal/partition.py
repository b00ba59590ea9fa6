"""Heterogeneous calibration splits.

Classification pools are skewed by drawing per-class agent proportions from
a symmetric Dirichlet(beta); regression pools are first binned by K-means
and then skewed per bin the same way.  Smaller beta means stronger skew.
Every split is an exact partition (disjoint, exhaustive) and a pure
function of (data, M, beta, B, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import TaskMismatchError, ValidationError

TASK_CLASSIFICATION = "classification"
TASK_REGRESSION = "regression"


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus targets; classification targets are class indices."""

    features: np.ndarray
    targets: np.ndarray
    task: str
    num_classes: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "features", x)
        if self.task not in (TASK_CLASSIFICATION, TASK_REGRESSION):
            raise ValidationError(f"unknown task: {self.task!r}")
        if self.task == TASK_CLASSIFICATION:
            y = np.asarray(self.targets, dtype=np.int64)
            if self.num_classes is None or self.num_classes < 2:
                raise ValidationError("classification dataset needs num_classes >= 2")
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValidationError("class labels out of range")
        else:
            y = np.asarray(self.targets, dtype=np.float64)
        if y.shape[0] != x.shape[0]:
            raise ValidationError(f"features ({x.shape[0]}) and targets ({y.shape[0]}) disagree in length")
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.targets[idx], self.task, self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    """Index lists into the calibration pool, one per agent.

    ``has_empty_agents`` flags agents that received nothing (possible under
    strongly skewed draws or pools smaller than M); the federation layer
    drops those agents from the round.
    """

    assignments: tuple[np.ndarray, ...]
    beta: float
    seed: int
    has_empty_agents: bool = False

    def pool_size(self) -> int:
        return int(sum(a.size for a in self.assignments))

    def sizes(self) -> list[int]:
        return [int(a.size) for a in self.assignments]

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "kind": "partition_plan",
            "beta": self.beta,
            "seed": self.seed,
            "has_empty_agents": self.has_empty_agents,
            "assignments": [a.tolist() for a in self.assignments],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        if doc.get("kind") != "partition_plan":
            raise ValidationError("not a partition plan document")
        return cls(
            assignments=tuple(np.asarray(a, dtype=np.int64) for a in doc["assignments"]),
            beta=float(doc["beta"]),
            seed=int(doc["seed"]),
            has_empty_agents=bool(doc["has_empty_agents"]),
        )


def _check_partition(assignments, pool_size) -> None:
    merged = np.concatenate([a for a in assignments]) if assignments else np.empty(0, dtype=np.int64)
    if merged.size != pool_size or not np.array_equal(np.sort(merged), np.arange(pool_size)):
        raise AssertionError("partition property violated (internal error)")


def train_cal_split(data: Dataset, cal_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint random split; calibration gets round(n * fraction) samples."""
    if not (0.0 < cal_fraction < 1.0):
        raise ValidationError(f"cal_fraction must be in (0, 1), got {cal_fraction}")
    n = len(data)
    if n < 2:
        raise ValidationError(f"need at least 2 samples to split, got {n}")
    n_cal = int(math.floor(n * cal_fraction + 0.5))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    cal_idx = np.sort(perm[:n_cal])
    train_idx = np.sort(perm[n_cal:])
    return data.subset(train_idx), data.subset(cal_idx)


def dirichlet_proportions(rng: np.random.Generator, m: int, beta: float) -> np.ndarray:
    """One draw from the symmetric Dirichlet(beta * 1_m)."""
    if m < 1:
        raise ValidationError(f"need m >= 1, got {m}")
    if not (beta > 0.0):
        raise ValidationError(f"beta must be positive, got {beta}")
    if m == 1:
        return np.ones(1)
    return rng.dirichlet(np.full(m, float(beta)))


def largest_remainder_counts(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing exactly to ``total`` that best match proportions.

    Floor the ideal counts, then hand the leftover units to the largest
    fractional remainders (ties to the lower index).
    """
    ideal = np.asarray(proportions, dtype=np.float64) * total
    base = np.floor(ideal).astype(np.int64)
    leftover = int(total - base.sum())
    if leftover > 0:
        remainders = ideal - base
        order = np.lexsort((np.arange(remainders.size), -remainders))
        base[order[:leftover]] += 1
    return base


def _split_group(rng, group_idx: np.ndarray, m: int, beta: float, buckets: list[list[np.ndarray]]) -> None:
    w = dirichlet_proportions(rng, m, beta)
    counts = largest_remainder_counts(group_idx.size, w)
    shuffled = rng.permutation(group_idx)
    start = 0
    for k in range(m):
        buckets[k].append(shuffled[start : start + counts[k]])
        start += counts[k]


def _finish_plan(buckets, pool_size, beta, seed) -> PartitionPlan:
    assignments = tuple(
        np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64) for parts in buckets
    )
    _check_partition(assignments, pool_size)
    return PartitionPlan(
        assignments=assignments,
        beta=float(beta),
        seed=int(seed),
        has_empty_agents=any(a.size == 0 for a in assignments),
    )


def dirichlet_label_partition(cal: Dataset, m: int, beta: float, seed: int) -> PartitionPlan:
    """Label-skewed partition: per class, agent shares drawn from Dir(beta)."""
    if cal.task != TASK_CLASSIFICATION:
        raise TaskMismatchError("label partition requires a classification dataset")
    if m < 1:
        raise ValidationError(f"need at least one agent, got {m}")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(m)]
    for c in range(cal.num_classes):
        class_idx = np.nonzero(cal.targets == c)[0]
        if class_idx.size == 0:
            continue
        _split_group(rng, class_idx, m, beta, buckets)
    return _finish_plan(buckets, len(cal), beta, seed)


def kmeans_bins(features, b: int, seed: int, max_iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm with seeded distinct-sample initialization.

    Runs to assignment fixpoint or max_iters.  An emptied bin is repaired by
    reseeding its centroid at the point farthest from its current centroid,
    so every bin is non-empty on return.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if b < 1:
        raise ValidationError(f"need b >= 1 bins, got {b}")
    if n < b:
        raise ValidationError(f"need at least {b} samples for {b} bins, got {n}")
    if b == 1:
        return np.zeros(n, dtype=np.int64)

    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=b, replace=False)].copy()
    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        nearest_d2 = d2[np.arange(n), new_assign]
        for k in range(b):
            if not np.any(new_assign == k):
                far = int(np.argmax(nearest_d2))
                centroids[k] = x[far]
                new_assign[far] = k
                nearest_d2[far] = -1.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(b):
            centroids[k] = x[assign == k].mean(axis=0)
    return assign


def dirichlet_covariate_partition(cal: Dataset, m: int, beta: float, b: int, seed: int) -> PartitionPlan:
    """Covariate-skewed partition: K-means bins, then per-bin Dir(beta) shares."""
    if cal.task != TASK_REGRESSION:
        raise TaskMismatchError("covariate partition requires a regression dataset")
    if m < 1:
        raise ValidationError(f"need at least one agent, got {m}")
    children = np.random.SeedSequence(seed).spawn(2)
    bins = kmeans_bins(cal.features, b, seed=int(children[0].generate_state(1)[0]))
    rng = np.random.default_rng(children[1])
    buckets: list[list[np.ndarray]] = [[] for _ in range(m)]
    for k in range(b):
        bin_idx = np.nonzero(bins == k)[0]
        if bin_idx.size == 0:
            continue
        _split_group(rng, bin_idx, m, beta, buckets)
    return _finish_plan(buckets, len(cal), beta, seed)
