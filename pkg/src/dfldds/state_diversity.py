"""Contribution-tracking state vectors and their diversity measures.

A vehicle's state vector holds one non-negative entry per fleet member: how
much of that member's data has flowed into the vehicle's current model,
through any chain of aggregations. Local training bumps the vehicle's own
entry; aggregation mixes whole vectors with the same weights applied to the
models. Diversity is read off with base-2 entropy and the divergence from
the fleet's sample-proportional target profile.

Entropy and divergence are exact: zero entries contribute zero (the 0*log 0
convention), and nothing is clamped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import TargetVector

_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class StateVector:
    """Non-negative per-vehicle contribution weights, optionally normalized."""

    values: np.ndarray
    normalized: bool

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 1 or len(v) == 0:
            raise ValueError("state vector must be a non-empty 1-d array")
        if (v < 0).any():
            raise ValueError("state vector entries must be non-negative")
        if self.normalized and abs(v.sum() - 1.0) > _SIMPLEX_TOL:
            raise ValueError("state vector marked normalized but does not sum to one")

    def __len__(self) -> int:
        return len(self.values)


def zero_state(n_vehicles: int) -> StateVector:
    """The all-zero vector every vehicle starts from."""
    return StateVector(np.zeros(n_vehicles), normalized=False)


def local_increment(s: StateVector, k: int, eta: float) -> StateVector:
    """Credit one local training iteration to vehicle k's own entry."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if not 0 <= k < len(s):
        raise ValueError(f"vehicle index {k} outside 0..{len(s) - 1}")
    v = s.values.copy()
    v[k] += eta
    return StateVector(v, normalized=False)


def normalize(s: StateVector) -> StateVector:
    """Scale to unit sum; the all-zero vector has no normalization."""
    total = s.values.sum()
    if total <= 0:
        raise ValueError("cannot normalize an all-zero state vector")
    return StateVector(s.values / total, normalized=True)


def mix(states: Sequence[StateVector], alpha: np.ndarray) -> StateVector:
    """Convex combination of normalized state vectors.

    The accumulation runs in the order given, so callers controlling peer
    order get bit-identical results regardless of thread count.
    """
    alpha = np.asarray(alpha, dtype=float)
    if len(states) == 0:
        raise ValueError("nothing to mix")
    if len(alpha) != len(states):
        raise ValueError(f"{len(alpha)} weights for {len(states)} state vectors")
    if (alpha < 0).any() or abs(alpha.sum() - 1.0) > _SIMPLEX_TOL:
        raise ValueError("mixing weights must lie on the simplex")
    n = len(states[0])
    acc = np.zeros(n)
    for a_j, s_j in zip(alpha, states):
        if len(s_j) != n:
            raise ValueError("state vectors differ in length")
        if not s_j.normalized:
            raise ValueError("mix requires normalized state vectors")
        acc += a_j * s_j.values
    return StateVector(acc, normalized=True)


def entropy(s: StateVector) -> float:
    """Shannon entropy in bits; 0 for one-hot, log2(K) for uniform."""
    if not s.normalized:
        raise ValueError("entropy is defined on normalized state vectors")
    v = s.values[s.values > 0]
    return float(-(v * np.log2(v)).sum()) + 0.0  # + 0.0 turns -0.0 into 0.0


def kl_divergence(s: StateVector, target: TargetVector) -> float:
    """Divergence in bits of s from the fleet's target profile.

    Zero-probability state entries contribute zero; a positive state entry
    facing a zero target entry has no finite divergence and is rejected.
    """
    if not s.normalized:
        raise ValueError("divergence is defined on normalized state vectors")
    if len(s) != len(target):
        raise ValueError("state vector and target profile differ in length")
    v, g = s.values, target.values
    support = v > 0
    if (g[support] == 0).any():
        raise ValueError("state vector places weight on a vehicle with zero target share")
    vs, gs = v[support], g[support]
    return float((vs * np.log2(vs / gs)).sum())
