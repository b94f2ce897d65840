"""Fleet-level evaluation: consensus spread, target hitting, correlation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .learner import ModelParams


def consensus_distance(models: Sequence[ModelParams]) -> float:
    """Mean squared distance of each model from the fleet average."""
    if len(models) == 0:
        raise ValueError("no models to compare")
    signature = models[0].signature
    for m in models:
        if m.signature != signature:
            raise ValueError("consensus distance needs identical architectures")
    W = np.stack([m.w for m in models])
    centered = W - W.mean(axis=0)
    return float((centered ** 2).sum(axis=1).mean())


def epochs_to_target(series: Sequence[float], target: float) -> int | None:
    """Index of the first entry >= target, or None if never reached."""
    for i, v in enumerate(series):
        if v >= target:
            return i
    return None


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Sample correlation; None when either input has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length vectors of at least 2 entries")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float((dx ** 2).sum())
    sy = float((dy ** 2).sum())
    if sx == 0.0 or sy == 0.0:
        return None
    return float((dx * dy).sum() / np.sqrt(sx * sy))


@dataclass(frozen=True)
class EpochMetrics:
    """Everything recorded about the fleet at the end of one epoch."""

    epoch: int
    per_vehicle_accuracy: np.ndarray
    avg_accuracy: float
    consensus_distance: float
    per_vehicle_entropy: np.ndarray
    per_vehicle_divergence: np.ndarray
    pearson_acc_entropy: float | None

    def __post_init__(self) -> None:
        k = len(self.per_vehicle_accuracy)
        if k == 0 or len(self.per_vehicle_entropy) != k or len(self.per_vehicle_divergence) != k:
            raise ValueError("per-vehicle series must be non-empty and equal length")
        if abs(self.avg_accuracy - float(np.mean(self.per_vehicle_accuracy))) > 1e-12:
            raise ValueError("avg_accuracy must be the mean of per-vehicle accuracy")


@dataclass
class MetricsLog:
    """Per-epoch records plus identifying run metadata."""

    entries: list[EpochMetrics] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, m: EpochMetrics) -> None:
        expected = self.entries[-1].epoch + 1 if self.entries else 0
        if m.epoch != expected:
            raise ValueError(f"epoch {m.epoch} out of order; expected {expected}")
        self.entries.append(m)

    def avg_accuracy_series(self) -> list[float]:
        return [e.avg_accuracy for e in self.entries]
