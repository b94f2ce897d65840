"""Vehicle motion on a road network and the range-based communication graph.

Vehicles move at constant speed along edges. At a junction the next edge is
drawn with the classic Manhattan turn probabilities: straight 0.5, left 0.25,
right 0.25, renormalized over the turn classes actually available. Reversing
is allowed only at dead ends. Distance left over after a junction crossing
carries into the next edge, so one step may traverse several edges.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .road_network import RoadGraph

DEFAULT_SPEED = 13.89  # meters/second, ~50 km/h urban traffic
DEFAULT_COMM_RANGE = 100.0  # meters

_TURN_PROBS = {"straight": 0.5, "left": 0.25, "right": 0.25}


@dataclass
class FleetState:
    """Positions of all vehicles, each with its own route-choice RNG stream.

    current_edge[k] is the directed edge (tail, head) vehicle k travels;
    progress[k] is meters covered from the tail node.
    """

    current_edge: list[tuple[int, int]]
    progress: np.ndarray
    speed: float
    rngs: list[np.random.Generator]

    def __post_init__(self) -> None:
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if len(self.current_edge) != len(self.progress) or len(self.rngs) != len(self.progress):
            raise ValueError("per-vehicle field lengths disagree")

    def __len__(self) -> int:
        return len(self.current_edge)


@dataclass(frozen=True)
class NeighborSets:
    """Per-vehicle communication sets: neighbors[k] excludes k itself."""

    neighbors: tuple[frozenset[int], ...]

    def peers(self, k: int) -> frozenset[int]:
        """Neighbors of k plus k itself (the aggregation group)."""
        return self.neighbors[k] | {k}


def init_fleet(g: RoadGraph, n_vehicles: int, speed: float = DEFAULT_SPEED,
               seed: int = 0) -> FleetState:
    """Scatter vehicles uniformly over the road length.

    Edge choice is proportional to edge length, direction is a fair coin,
    progress is uniform along the edge. Vehicle k gets its own child RNG
    stream, so route choices are independent across vehicles.
    """
    if n_vehicles < 1:
        raise ValueError("need at least one vehicle")
    if not g.edges:
        raise ValueError("road network has no edges to place vehicles on")
    children = np.random.SeedSequence(seed).spawn(n_vehicles + 1)
    placement = np.random.default_rng(children[0])
    lengths = np.array([e[2] for e in g.edges])
    cumulative = np.cumsum(lengths) / lengths.sum()

    edges: list[tuple[int, int]] = []
    progress = np.empty(n_vehicles)
    for k in range(n_vehicles):
        a, b, length = g.edges[int(np.searchsorted(cumulative, placement.random()))]
        if placement.random() < 0.5:
            a, b = b, a
        edges.append((a, b))
        progress[k] = placement.uniform(0.0, length)
    rngs = [np.random.default_rng(children[k + 1]) for k in range(n_vehicles)]
    return FleetState(edges, progress, speed, rngs)


def _signed_angle(d_in: tuple[float, float], d_out: tuple[float, float]) -> float:
    cross = d_in[0] * d_out[1] - d_in[1] * d_out[0]
    dot = d_in[0] * d_out[0] + d_in[1] * d_out[1]
    return math.atan2(cross, dot)


def classify_turn(g: RoadGraph, prev_node: int, junction: int, next_node: int) -> str:
    """Classify the turn prev->junction->next as straight, left, or right."""
    px, py = g.position(prev_node)
    jx, jy = g.position(junction)
    nx, ny = g.position(next_node)
    theta = _signed_angle((jx - px, jy - py), (nx - jx, ny - jy))
    if abs(theta) <= math.pi / 4:
        return "straight"
    return "left" if theta > 0 else "right"


def choose_next_edge(g: RoadGraph, prev_node: int, junction: int,
                     rng: np.random.Generator) -> int:
    """Draw the next node after arriving at ``junction`` from ``prev_node``.

    The reverse edge is excluded unless the junction is a dead end. Candidate
    edges are grouped into turn classes; a class is drawn with probability
    0.5/0.25/0.25 renormalized over the non-empty classes, and inside a class
    the smallest node id wins.
    """
    candidates = [n for n in g.adjacency[junction] if n != prev_node]
    if not candidates:
        return prev_node  # dead end: forced U-turn
    if len(candidates) == 1:
        return candidates[0]  # forced move, no randomness consumed
    classes: dict[str, list[int]] = {}
    for n in candidates:
        classes.setdefault(classify_turn(g, prev_node, junction, n), []).append(n)
    labels = [c for c in ("straight", "left", "right") if c in classes]
    weights = np.array([_TURN_PROBS[c] for c in labels])
    weights /= weights.sum()
    pick = labels[int(np.searchsorted(np.cumsum(weights), rng.random(), side="right"))]
    return min(classes[pick])


def _advance(g: RoadGraph, edge: tuple[int, int], progress: float, distance: float,
             rng: np.random.Generator) -> tuple[tuple[int, int], float]:
    remaining = distance
    tail, head = edge
    while True:
        to_junction = g.edge_length[(tail, head)] - progress
        if remaining < to_junction:
            return (tail, head), progress + remaining
        remaining -= to_junction
        nxt = choose_next_edge(g, tail, head, rng)
        tail, head = head, nxt
        progress = 0.0


def step_fleet(f: FleetState, g: RoadGraph, dt: float) -> FleetState:
    """Advance every vehicle by speed*dt meters; returns a new FleetState.

    The input state is left untouched: each vehicle's RNG is copied and the
    copy advanced, so a fleet can be re-stepped for reproducibility checks.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    edges: list[tuple[int, int]] = []
    progress = np.empty(len(f))
    rngs: list[np.random.Generator] = []
    for k in range(len(f)):
        if not g.has_edge(*f.current_edge[k]):
            raise ValueError(f"vehicle {k} sits on an edge missing from the network")
        rng = copy.deepcopy(f.rngs[k])
        edge, prog = _advance(g, f.current_edge[k], float(f.progress[k]),
                              f.speed * dt, rng)
        edges.append(edge)
        progress[k] = prog
        rngs.append(rng)
    return FleetState(edges, progress, f.speed, rngs)


def vehicle_positions(f: FleetState, g: RoadGraph) -> np.ndarray:
    """Planar coordinates of every vehicle, shape (K, 2)."""
    out = np.empty((len(f), 2))
    for k, (tail, head) in enumerate(f.current_edge):
        tx, ty = g.position(tail)
        hx, hy = g.position(head)
        frac = f.progress[k] / g.edge_length[(tail, head)]
        out[k] = (tx + frac * (hx - tx), ty + frac * (hy - ty))
    return out


def comm_graph(f: FleetState, g: RoadGraph, comm_range: float = DEFAULT_COMM_RANGE) -> NeighborSets:
    """Symmetric neighbor sets: vehicles within Euclidean distance comm_range."""
    if comm_range <= 0:
        raise ValueError("comm_range must be positive")
    pts = vehicle_positions(f, g)
    diff = pts[:, None, :] - pts[None, :, :]
    within = (diff ** 2).sum(axis=2) <= comm_range ** 2
    np.fill_diagonal(within, False)
    return NeighborSets(tuple(frozenset(np.flatnonzero(row)) for row in within))
