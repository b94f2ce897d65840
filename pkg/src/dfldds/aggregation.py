"""Aggregation-weight optimization and the per-epoch vehicle protocols.

Three strategies share one exchange loop:

* ``dds``: each vehicle picks the convex mixing weights over its reachable
  group that minimize the divergence of the mixed contribution profile from
  the fleet's target profile, then applies the same weights to models and
  state vectors before local training.
* ``dfl``: mixing weights proportional to reachable sample counts.
* ``sp``: subgradient push-sum; every vehicle broadcasts its numerator and
  weight scaled by its own group size, sums what it hears, and takes one
  full-batch gradient step on the de-biased estimate.

The weight optimization is a projection-free exponentiated-gradient descent
on the simplex with backtracking line search: multiplicative update
``alpha * exp(-step * grad)`` followed by renormalization, step halved until
the objective decreases. The objective is convex, so the uniform start and
the deterministic schedule make the result reproducible bit for bit.

Every sum over group members runs as an ordered Python-level accumulation in
ascending vehicle id, keeping results independent of thread count and BLAS
reduction order.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Dataset, TargetVector
from .learner import ModelParams, full_gradient, local_epochs
from .mobility import NeighborSets
from .state_diversity import StateVector, local_increment, normalize

_SIMPLEX_TOL = 1e-9
_LOG_CLAMP = 1e-12  # floor inside solver logs; exact metrics never clamp
_INV_LN2 = 1.0 / math.log(2.0)
_MAX_HALVINGS = 60

STRATEGIES = ("dds", "dfl", "sp")


class SolverConvergenceWarning(RuntimeWarning):
    """Weight optimization hit its iteration budget away from stationarity."""


class VehicleStepError(RuntimeError):
    """One vehicle's epoch update failed; carries the vehicle id."""

    def __init__(self, vehicle_id: int) -> None:
        super().__init__(f"epoch update failed for vehicle {vehicle_id}")
        self.vehicle_id = vehicle_id


@dataclass(frozen=True)
class WeightVector:
    """Aggregation weights on the simplex, keyed by ascending vehicle id."""

    members: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        if len(self.members) != len(self.values) or len(self.members) == 0:
            raise ValueError("weight vector needs one weight per member")
        if any(b <= a for a, b in zip(self.members, self.members[1:])):
            raise ValueError("member ids must be strictly increasing")
        if (self.values < 0).any() or abs(self.values.sum() - 1.0) > _SIMPLEX_TOL:
            raise ValueError("weights must lie on the simplex")

    def as_dict(self) -> dict[int, float]:
        return {m: float(v) for m, v in zip(self.members, self.values)}


def _default_members(p: int, members) -> tuple[int, ...]:
    return tuple(range(p)) if members is None else tuple(members)


@dataclass
class VehicleRuntime:
    """Everything one vehicle carries between epochs."""

    vehicle_id: int
    model: ModelParams
    state: StateVector
    data: Dataset
    rng: np.random.Generator
    sp_x: np.ndarray | None = None  # push-sum numerator
    sp_y: float = 1.0               # push-sum weight

    def __post_init__(self) -> None:
        if self.vehicle_id < 0:
            raise ValueError("vehicle_id must be non-negative")
        if len(self.data) == 0:
            raise ValueError("a vehicle needs at least one training sample")
        if self.sp_y <= 0:
            raise ValueError("push-sum weight must stay positive")


@dataclass(frozen=True)
class StepParams:
    """Hyperparameters shared by every vehicle's epoch update."""

    eta: float
    local_passes: int
    batch_size: int
    solver_tol: float = 1e-10
    solver_max_iter: int = 5000
    state_order: str = "aggregate_first"

    def __post_init__(self) -> None:
        if self.eta <= 0 or self.local_passes < 1 or self.batch_size < 1:
            raise ValueError("eta, local_passes, and batch_size must be positive")
        if self.solver_tol <= 0 or self.solver_max_iter < 1:
            raise ValueError("solver_tol and solver_max_iter must be positive")
        if self.state_order not in ("aggregate_first", "increment_first"):
            raise ValueError("state_order must be aggregate_first or increment_first")


# ── Weight optimization ─────────────────────────────────────────────────────

def _mixture(states: Sequence[StateVector], alpha: np.ndarray) -> np.ndarray:
    acc = np.zeros(len(states[0]))
    for a_j, s_j in zip(alpha, states):
        acc += a_j * s_j.values
    return acc


def kl_objective_and_gradient(states: Sequence[StateVector], target: TargetVector,
                              alpha: np.ndarray) -> tuple[float, np.ndarray]:
    """Divergence of the mixed profile from the target, and its gradient.

    Evaluates the smooth extension off the simplex as well, so finite
    differences can probe it; mixture entries are floored at 1e-12 inside the
    logs to keep the gradient finite on the boundary.
    """
    if len(states) == 0:
        raise ValueError("no states to mix")
    alpha = np.asarray(alpha, dtype=float)
    if len(alpha) != len(states):
        raise ValueError(f"{len(alpha)} weights for {len(states)} states")
    m = _mixture(states, alpha)
    log_ratio = np.log2(np.maximum(m, _LOG_CLAMP)) - np.log2(target.values)
    value = float((m * log_ratio).sum())
    per_vehicle = log_ratio + _INV_LN2
    grad = np.array([float(s_j.values @ per_vehicle) for s_j in states])
    return value, grad


def solve_weights(states: Sequence[StateVector], target: TargetVector,
                  members: Sequence[int] | None = None, tol: float = 1e-10,
                  max_iter: int = 5000,
                  trace: list[float] | None = None) -> WeightVector:
    """Minimize the mixed-profile divergence over the simplex.

    Deterministic: uniform start, backtracking from unit step. The objective
    is convex, so the per-iteration trace (appended to ``trace`` when given)
    never increases. If the iteration budget runs out away from stationarity
    a SolverConvergenceWarning is emitted and the best iterate is returned,
    so a running fleet never stalls.
    """
    if len(states) == 0:
        raise ValueError("no states to solve over")
    if (target.values <= 0).any():
        raise ValueError("solver needs a strictly positive target profile")
    for s in states:
        if len(s) != len(target):
            raise ValueError("state vector and target profile differ in length")
    p = len(states)
    alpha = np.full(p, 1.0 / p)
    value, grad = kl_objective_and_gradient(states, target, alpha)
    if trace is not None:
        trace.append(value)
    exhausted = True
    for _ in range(max_iter):
        step = 1.0
        accepted = None
        for _ in range(_MAX_HALVINGS):
            trial = alpha * np.exp(-step * (grad - grad.min()))
            trial /= trial.sum()
            trial_value, trial_grad = kl_objective_and_gradient(states, target, trial)
            if trial_value < value:
                accepted = (trial, trial_value, trial_grad)
                break
            step *= 0.5
        if accepted is None:
            exhausted = False  # no descent step exists: stationary point
            break
        improvement = value - accepted[1]
        alpha, value, grad = accepted
        if trace is not None:
            trace.append(value)
        if improvement < tol:
            exhausted = False
            break
    if exhausted:
        gap = float(alpha @ grad - grad.min())  # linear optimality gap
        if gap > tol:
            warnings.warn(
                f"weight solver stopped at iteration budget with optimality gap {gap:.3e}",
                SolverConvergenceWarning,
            )
    return WeightVector(_default_members(p, members), alpha)


def _composition_blocks(n_steps: int, p: int):
    """Yield integer compositions of n_steps into p parts, lexicographically."""
    if p == 1:
        yield np.array([[n_steps]], dtype=float)
    elif p == 2:
        i = np.arange(n_steps + 1)
        yield np.stack([i, n_steps - i], axis=1).astype(float)
    elif p == 3:
        for i0 in range(n_steps + 1):
            j = np.arange(n_steps - i0 + 1)
            yield np.stack([np.full_like(j, i0), j, n_steps - i0 - j], axis=1).astype(float)
    else:
        for i0 in range(n_steps + 1):
            for i1 in range(n_steps + 1 - i0):
                j = np.arange(n_steps - i0 - i1 + 1)
                yield np.stack(
                    [np.full_like(j, i0), np.full_like(j, i1), j, n_steps - i0 - i1 - j],
                    axis=1,
                ).astype(float)


def brute_force_weights(states: Sequence[StateVector], target: TargetVector,
                        grid_step: float = 1e-2,
                        members: Sequence[int] | None = None) -> WeightVector:
    """Exhaustive simplex grid search; oracle for small groups only.

    Ties break toward the lexicographically smallest weight vector. The grid
    has round(1/grid_step)+1 points per axis, so only groups of up to four
    are accepted.
    """
    p = len(states)
    if p == 0:
        raise ValueError("no states to solve over")
    if p > 4:
        raise ValueError("grid search supports at most four group members")
    n_steps = round(1.0 / grid_step)
    if n_steps < 1:
        raise ValueError("grid_step must be at most 1")
    S = np.stack([s.values for s in states])
    g = target.values
    with np.errstate(divide="ignore"):
        log_g = np.log2(g)
    best_value = math.inf
    best = None
    for block in _composition_blocks(n_steps, p):
        A = block / n_steps
        M = A @ S
        with np.errstate(divide="ignore", invalid="ignore"):
            T = M * (np.log2(M) - log_g[None, :])
        T = np.where(M > 0, T, 0.0)
        if (g == 0).any():
            T = np.where((M > 0) & (g[None, :] == 0), np.inf, T)
        values = T.sum(axis=1)
        i = int(np.argmin(values))
        if values[i] < best_value:
            best_value = float(values[i])
            best = A[i].copy()
    return WeightVector(_default_members(p, members), best)


def dfl_weights(sizes: Sequence[int], members: Sequence[int] | None = None) -> WeightVector:
    """Baseline weights proportional to reachable sample counts."""
    sizes = np.asarray(sizes, dtype=float)
    if len(sizes) == 0 or (sizes < 0).any():
        raise ValueError("sizes must be non-negative and non-empty")
    total = sizes.sum()
    if total == 0:
        raise ValueError("every reachable vehicle reports zero samples")
    return WeightVector(_default_members(len(sizes), members), sizes / total)


# ── Model and state updates ──────────────────────────────────────────────────

def aggregate_models(models: Sequence[ModelParams], alpha: np.ndarray) -> ModelParams:
    """Coordinate-wise convex combination of identically shaped models."""
    alpha = np.asarray(alpha, dtype=float)
    if len(models) == 0 or len(models) != len(alpha):
        raise ValueError("need one weight per model")
    if (alpha < 0).any() or abs(alpha.sum() - 1.0) > _SIMPLEX_TOL:
        raise ValueError("aggregation weights must lie on the simplex")
    signature = models[0].signature
    acc = np.zeros_like(models[0].w)
    for a_j, m_j in zip(alpha, models):
        if m_j.signature != signature:
            raise ValueError("cannot aggregate models with different architectures")
        acc += a_j * m_j.w
    return replace(models[0], w=acc)


def _exchange_state(rt: VehicleRuntime, params: StepParams, n_incr: int) -> StateVector:
    """The state snapshot a vehicle shows its group this epoch."""
    if params.state_order != "increment_first":
        return rt.state
    s = rt.state
    for _ in range(n_incr):
        s = local_increment(s, rt.vehicle_id, params.eta)
    return normalize(s)


def _next_state(rt: VehicleRuntime, states: Sequence[StateVector], alpha: np.ndarray,
                params: StepParams, n_incr: int) -> StateVector:
    """Apply the configured state-update ordering for one epoch."""
    acc = _mixture(states, np.asarray(alpha, dtype=float))
    if params.state_order == "increment_first":
        # Mixed vectors were already incremented and normalized before exchange.
        return StateVector(acc, normalized=True)
    acc[rt.vehicle_id] += n_incr * params.eta
    return StateVector(acc / acc.sum(), normalized=True)


def _members_with_self(rt: VehicleRuntime, received, own_state: StateVector):
    entries = list(received) + [(rt.vehicle_id, rt.model, own_state)]
    entries.sort(key=lambda e: e[0])
    if len({e[0] for e in entries}) != len(entries):
        raise ValueError("duplicate vehicle ids in the reachable group")
    return entries


def _train_and_update(rt: VehicleRuntime, entries, weights: WeightVector,
                      params: StepParams) -> VehicleRuntime:
    model = aggregate_models([e[1] for e in entries], weights.values)
    model = local_epochs(model, rt.data, params.local_passes, params.batch_size,
                         params.eta, rt.rng)
    state = _next_state(rt, [e[2] for e in entries], weights.values, params,
                        n_incr=params.local_passes)
    return replace(rt, model=model, state=state)


def dds_vehicle_step(rt: VehicleRuntime, received, target: TargetVector,
                     params: StepParams) -> VehicleRuntime:
    """Divergence-minimizing epoch update.

    ``received`` holds (peer_id, model, state) from every reachable neighbor;
    the vehicle's own entries join automatically. Weight optimization runs
    first, then model aggregation, local training, and the state update with
    the same weights.
    """
    own_state = _exchange_state(rt, params, params.local_passes)
    entries = _members_with_self(rt, received, own_state)
    weights = solve_weights([e[2] for e in entries], target,
                            members=[e[0] for e in entries],
                            tol=params.solver_tol, max_iter=params.solver_max_iter)
    return _train_and_update(rt, entries, weights, params)


def dfl_vehicle_step(rt: VehicleRuntime, received, sizes: Sequence[int],
                     target: TargetVector, params: StepParams) -> VehicleRuntime:
    """Sample-count-proportional epoch update (classic gossip baseline)."""
    own_state = _exchange_state(rt, params, params.local_passes)
    entries = _members_with_self(rt, received, own_state)
    ids = [e[0] for e in entries]
    weights = dfl_weights([sizes[j] for j in ids], members=ids)
    return _train_and_update(rt, entries, weights, params)


def sp_vehicle_step(rt: VehicleRuntime, received, target: TargetVector,
                    params: StepParams) -> VehicleRuntime:
    """Subgradient push-sum epoch update.

    ``received`` holds (peer_id, x_share, y_share, state) where each sender
    already divided by its own group size. The vehicle adds its own share,
    de-biases, and takes one full-batch gradient step on the de-biased
    estimate, so the estimate moves by -eta * gradient. State vectors mix
    with each member's share of the summed push-sum weight, which is exactly
    the fraction of the new de-biased estimate that member contributed.
    """
    if rt.sp_x is None:
        raise ValueError("push-sum fields are not initialized")
    group_size = len(received) + 1
    own = (rt.vehicle_id, rt.sp_x / group_size, rt.sp_y / group_size,
           _exchange_state(rt, params, 1))
    entries = list(received) + [own]
    entries.sort(key=lambda e: e[0])
    if len({e[0] for e in entries}) != len(entries):
        raise ValueError("duplicate vehicle ids in the reachable group")

    x_new = np.zeros_like(rt.sp_x)
    y_new = 0.0
    for _, x_share, y_share, _s in entries:
        x_new = x_new + x_share
        y_new = y_new + y_share
    debiased = x_new / y_new
    grad = full_gradient(replace(rt.model, w=debiased), rt.data)
    x_final = x_new - params.eta * y_new * grad
    model = replace(rt.model, w=x_final / y_new)

    y_shares = np.array([e[2] for e in entries])
    state = _next_state(rt, [e[3] for e in entries], y_shares / y_shares.sum(),
                        params, n_incr=1)
    return replace(rt, model=model, state=state, sp_x=x_final, sp_y=y_new)


# ── Fleet-wide exchange ──────────────────────────────────────────────────────

def epoch_exchange(strategy: str, runtimes: Sequence[VehicleRuntime],
                   comm: NeighborSets, target: TargetVector, params: StepParams,
                   n_threads: int = 1) -> list[VehicleRuntime]:
    """Run one synchronized epoch for the whole fleet.

    Double-buffered: every vehicle reads only the epoch-start snapshot, so
    update order (and thread count) cannot leak one vehicle's new values into
    another's step. Per-vehicle failures are re-raised tagged with the
    vehicle id.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    n = len(runtimes)
    if len(comm.neighbors) != n:
        raise ValueError("neighbor sets and runtimes disagree on fleet size")
    if [rt.vehicle_id for rt in runtimes] != list(range(n)):
        raise ValueError("runtimes must be ordered by vehicle id 0..K-1")

    n_incr = 1 if strategy == "sp" else params.local_passes
    models = [rt.model for rt in runtimes]
    exchange_states = [_exchange_state(rt, params, n_incr) for rt in runtimes]
    if strategy == "sp":
        for rt in runtimes:
            if rt.sp_x is None:
                raise ValueError("push-sum fields are not initialized")
        group_sizes = [len(comm.peers(k)) for k in range(n)]
        x_shares = [runtimes[k].sp_x / group_sizes[k] for k in range(n)]
        y_shares = [runtimes[k].sp_y / group_sizes[k] for k in range(n)]
    else:
        sizes = [len(rt.data) for rt in runtimes]

    def one_vehicle(k: int) -> VehicleRuntime:
        neigh = sorted(comm.neighbors[k])
        try:
            if strategy == "dds":
                received = [(j, models[j], exchange_states[j]) for j in neigh]
                return dds_vehicle_step(runtimes[k], received, target, params)
            if strategy == "dfl":
                received = [(j, models[j], exchange_states[j]) for j in neigh]
                return dfl_vehicle_step(runtimes[k], received, sizes, target, params)
            received = [(j, x_shares[j], y_shares[j], exchange_states[j]) for j in neigh]
            return sp_vehicle_step(runtimes[k], received, target, params)
        except Exception as exc:
            raise VehicleStepError(k) from exc

    if n_threads <= 1:
        return [one_vehicle(k) for k in range(n)]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        futures = [pool.submit(one_vehicle, k) for k in range(n)]
        return [f.result() for f in futures]
