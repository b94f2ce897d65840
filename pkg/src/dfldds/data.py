"""Datasets, fleet partitions, and the sample-proportional target profile.

The synthetic task is Gaussian class clusters around unit-norm random
centers. Two partition schemes distribute training samples over vehicles:
balanced label-sorted shards (equal sizes, few labels each) and unbalanced
IID draws (random size levels, all labels represented in expectation).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Feature matrix X (n, d), integer labels y (n,), and the class count."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.X) != len(self.y):
            raise ValueError("X must be (n, d) and y must be (n,) with matching n")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.X[indices], self.y[indices], self.n_classes)


@dataclass(frozen=True)
class Partition:
    """Disjoint per-vehicle index lists into one training Dataset."""

    indices: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        total = np.concatenate([np.asarray(ix) for ix in self.indices]) if self.indices else np.array([])
        if len(np.unique(total)) != len(total):
            raise ValueError("partition assigns a sample to more than one vehicle")

    @property
    def n_vehicles(self) -> int:
        return len(self.indices)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices])


@dataclass(frozen=True)
class TargetVector:
    """Per-vehicle share of the fleet's training data; sums to one."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 1 or len(v) == 0:
            raise ValueError("target vector must be a non-empty 1-d array")
        if (v < 0).any():
            raise ValueError("target vector entries must be non-negative")
        if abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("target vector must sum to one")

    def __len__(self) -> int:
        return len(self.values)


def gen_synthetic(n_classes: int, n_features: int, per_class: int, spread: float,
                  seed: int, scale: float = 1.0) -> tuple[Dataset, Dataset]:
    """Gaussian clusters around random centers of norm ``scale``; 80/20 split.

    ``per_class`` counts train plus test samples of one class; ``spread`` is
    the per-coordinate standard deviation around the class center. ``scale``
    sets the overall feature magnitude: difficulty is governed by the ratio
    spread/scale, while the absolute size controls how fast gradient methods
    move at a fixed learning rate.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_features < 1:
        raise ValueError("need at least one feature")
    if per_class < 10:
        raise ValueError("per_class must be at least 10")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, n_features))
    centers *= scale / np.linalg.norm(centers, axis=1, keepdims=True)

    n_train = (per_class * 4) // 5
    train_parts, test_parts = [], []
    for c in range(n_classes):
        pts = centers[c] + rng.normal(scale=spread, size=(per_class, n_features))
        train_parts.append((pts[:n_train], np.full(n_train, c)))
        test_parts.append((pts[n_train:], np.full(per_class - n_train, c)))

    def _assemble(parts):
        X = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts]).astype(np.int64)
        order = rng.permutation(len(y))
        return Dataset(X[order], y[order], n_classes)

    return _assemble(train_parts), _assemble(test_parts)


def partition_balanced_noniid(ds: Dataset, n_vehicles: int, shards_per_vehicle: int,
                              seed: int) -> Partition:
    """Label-sorted shard assignment: equal sizes, few labels per vehicle.

    Samples are sorted by label and cut into n_vehicles*shards_per_vehicle
    equal shards (remainder dropped); each vehicle draws shards_per_vehicle
    shards without replacement.
    """
    if n_vehicles < 1 or shards_per_vehicle < 1:
        raise ValueError("need n_vehicles >= 1 and shards_per_vehicle >= 1")
    n_shards = n_vehicles * shards_per_vehicle
    if n_shards > len(ds):
        raise ValueError(
            f"cannot cut {len(ds)} samples into {n_shards} non-empty shards"
        )
    shard_size = len(ds) // n_shards
    order = np.argsort(ds.y, kind="stable")[: n_shards * shard_size]
    shards = order.reshape(n_shards, shard_size)
    assignment = np.random.default_rng(seed).permutation(n_shards)
    indices = tuple(
        np.sort(shards[assignment[k * shards_per_vehicle:(k + 1) * shards_per_vehicle]].ravel())
        for k in range(n_vehicles)
    )
    return Partition(indices)


def partition_unbalanced_iid(ds: Dataset, n_vehicles: int, size_levels,
                             seed: int) -> Partition:
    """IID draws with per-vehicle sizes picked uniformly from size_levels."""
    levels = np.asarray(size_levels, dtype=int)
    if n_vehicles < 1:
        raise ValueError("need n_vehicles >= 1")
    if len(levels) == 0 or (levels < 1).any():
        raise ValueError("size_levels must be positive integers")
    rng = np.random.default_rng(seed)
    sizes = levels[rng.integers(0, len(levels), size=n_vehicles)]
    if sizes.sum() > len(ds):
        raise ValueError(
            f"drawn sizes total {int(sizes.sum())} but only {len(ds)} samples exist"
        )
    pool = rng.permutation(len(ds))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    indices = tuple(np.sort(pool[bounds[k]:bounds[k + 1]]) for k in range(n_vehicles))
    return Partition(indices)


def target_vector(p: Partition) -> TargetVector:
    """Normalized per-vehicle sample counts n_k / n."""
    sizes = p.sizes.astype(float)
    total = sizes.sum()
    if total == 0:
        raise ValueError("partition holds no samples at all")
    return TargetVector(sizes / total)


# ── Flat-file interchange ────────────────────────────────────────────────────

def save_dataset_csv(ds: Dataset, path: str) -> None:
    """One row per sample: label,f0,f1,..."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(ds.n_features)])
        for label, row in zip(ds.y, ds.X):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def load_dataset_csv(path: str, n_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][0] == "label":
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path} holds no samples")
    y = np.array([int(r[0]) for r in rows], dtype=np.int64)
    X = np.array([[float(v) for v in r[1:]] for r in rows])
    return Dataset(X, y, n_classes if n_classes is not None else int(y.max()) + 1)


def save_partition_json(p: Partition, path: str) -> None:
    obj = {str(k): [int(i) for i in p.indices[k]] for k in range(p.n_vehicles)}
    with open(path, "w") as fh:
        json.dump(obj, fh, separators=(",", ":"))


def load_partition_json(path: str) -> Partition:
    with open(path) as fh:
        obj = json.load(fh)
    return Partition(tuple(
        np.array(obj[str(k)], dtype=np.int64) for k in range(len(obj))
    ))
