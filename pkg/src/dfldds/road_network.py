"""Road network generation: grid, spider, and perturbed-random topologies.

A road network is an undirected, connected graph embedded in the plane.
Nodes are junctions with coordinates in meters; edges are straight road
segments whose stored length always equals the Euclidean distance between
their endpoints.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# Tolerance for the stored-length == Euclidean-distance invariant.
_LENGTH_TOL = 1e-9


@dataclass(frozen=True)
class RoadGraph:
    """Immutable planar road network.

    nodes: tuple of (node_id, x, y); ids are 0..n-1 in order.
    edges: tuple of (a, b, length) with a < b, no self-loops, no duplicates.
    """

    nodes: tuple[tuple[int, float, float], ...]
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self) -> None:
        if len(self.nodes) < 1:
            raise ValueError("road network needs at least one node")
        ids = [n[0] for n in self.nodes]
        if ids != list(range(len(self.nodes))):
            raise ValueError("node ids must be 0..n-1 in order")
        pos = {n[0]: (n[1], n[2]) for n in self.nodes}
        seen: set[tuple[int, int]] = set()
        for a, b, length in self.edges:
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            if not (0 <= a < len(self.nodes) and 0 <= b < len(self.nodes)):
                raise ValueError(f"edge ({a},{b}) references unknown node")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            if length <= 0:
                raise ValueError(f"edge {key} has non-positive length")
            dist = math.dist(pos[a], pos[b])
            if abs(dist - length) > _LENGTH_TOL:
                raise ValueError(
                    f"edge {key} length {length} != Euclidean distance {dist}"
                )
        if len(self.nodes) > 1 and not _connected(len(self.nodes), self.edges):
            raise ValueError("road network is not connected")

    @cached_property
    def adjacency(self) -> dict[int, tuple[int, ...]]:
        adj: dict[int, list[int]] = {n[0]: [] for n in self.nodes}
        for a, b, _ in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return {k: tuple(sorted(v)) for k, v in adj.items()}

    @cached_property
    def edge_length(self) -> dict[tuple[int, int], float]:
        out: dict[tuple[int, int], float] = {}
        for a, b, length in self.edges:
            out[(a, b)] = length
            out[(b, a)] = length
        return out

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([(x, y) for _, x, y in self.nodes], dtype=float)

    def position(self, node_id: int) -> tuple[float, float]:
        _, x, y = self.nodes[node_id]
        return (x, y)

    def has_edge(self, a: int, b: int) -> bool:
        return (a, b) in self.edge_length


def _connected(n_nodes: int, edges) -> bool:
    adj: dict[int, list[int]] = {i: [] for i in range(n_nodes)}
    for a, b, *_ in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n_nodes


def _edge(a: int, b: int, pos_a: tuple[float, float], pos_b: tuple[float, float]):
    lo, hi = (a, b) if a < b else (b, a)
    return (lo, hi, math.dist(pos_a, pos_b))


def gen_grid(rows: int, cols: int, spacing: float) -> RoadGraph:
    """Rectangular lattice: rows x cols junctions, 4-neighbor streets."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs rows >= 2 and cols >= 2")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    nodes = []
    for r in range(rows):
        for c in range(cols):
            nodes.append((r * cols + c, c * spacing, r * spacing))
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1, spacing))
            if r + 1 < rows:
                edges.append((i, i + cols, spacing))
    return RoadGraph(tuple(nodes), tuple(sorted(edges)))


def gen_spider(arms: int, circles: int, radius_inc: float) -> RoadGraph:
    """Spider web: radial arms crossed by concentric ring roads.

    Node 0 is the center. Ring node ids are 1 + c*arms + a for circle c
    (innermost first) and arm a. Ring edges are straight chords between
    angularly adjacent nodes of the same circle; radial edges connect a node
    to the next circle inward (or to the center from the innermost circle).
    """
    if arms < 3:
        raise ValueError("spider needs arms >= 3")
    if circles < 1:
        raise ValueError("spider needs circles >= 1")
    if radius_inc <= 0:
        raise ValueError("radius_inc must be positive")
    nodes: list[tuple[int, float, float]] = [(0, 0.0, 0.0)]
    for c in range(circles):
        radius = (c + 1) * radius_inc
        for a in range(arms):
            angle = 2.0 * math.pi * a / arms
            nid = 1 + c * arms + a
            nodes.append((nid, radius * math.cos(angle), radius * math.sin(angle)))
    pos = {n[0]: (n[1], n[2]) for n in nodes}
    edges = []
    for c in range(circles):
        for a in range(arms):
            nid = 1 + c * arms + a
            ring_next = 1 + c * arms + (a + 1) % arms
            edges.append(_edge(nid, ring_next, pos[nid], pos[ring_next]))
            inward = 0 if c == 0 else nid - arms
            edges.append(_edge(nid, inward, pos[nid], pos[inward]))
    return RoadGraph(tuple(nodes), tuple(sorted(edges)))


def gen_random(n_nodes: int, min_len: float, max_len: float, seed: int) -> RoadGraph:
    """Irregular street network built as a perturbed partial lattice.

    Node positions are jittered lattice points; lattice edges survive only if
    their perturbed length stays inside [min_len, max_len]; a random fraction
    of the survivors is then deleted, never breaking connectivity. Node
    degrees end up in [1, 4].
    """
    if n_nodes < 2:
        raise ValueError("random network needs n_nodes >= 2")
    if not (0 < min_len <= max_len):
        raise ValueError("need 0 < min_len <= max_len")
    rng = np.random.default_rng(seed)
    rows = max(1, math.isqrt(n_nodes))
    cols = math.ceil(n_nodes / rows)
    spacing = 0.5 * (min_len + max_len)
    jitter = 0.25 * (max_len - min_len)

    lattice = [(i // cols, i % cols) for i in range(n_nodes)]
    candidates = []
    index = {rc: i for i, rc in enumerate(lattice)}
    for i, (r, c) in enumerate(lattice):
        if (r, c + 1) in index:
            candidates.append((i, index[(r, c + 1)]))
        if (r + 1, c) in index:
            candidates.append((i, index[(r + 1, c)]))

    for _ in range(100):
        offsets = rng.uniform(-jitter, jitter, size=(n_nodes, 2)) if jitter > 0 else np.zeros((n_nodes, 2))
        pts = [
            (c * spacing + offsets[i, 0], r * spacing + offsets[i, 1])
            for i, (r, c) in enumerate(lattice)
        ]
        kept = []
        for a, b in candidates:
            length = math.dist(pts[a], pts[b])
            if min_len - _LENGTH_TOL <= length <= max_len + _LENGTH_TOL:
                kept.append((a, b))
        if _connected(n_nodes, kept):
            break
    else:
        raise RuntimeError(
            "failed to produce a connected random network; "
            "generator parameters are inconsistent"
        )

    # Thin the lattice: drop edges at random wherever connectivity allows.
    edge_set = set(kept)
    order = list(kept)
    rng.shuffle(order)
    for e in order:
        if rng.random() < 0.25:
            trial = edge_set - {e}
            if _connected(n_nodes, trial):
                edge_set = trial

    nodes = tuple((i, float(pts[i][0]), float(pts[i][1])) for i in range(n_nodes))
    edges = tuple(sorted(_edge(a, b, pts[a], pts[b]) for a, b in edge_set))
    return RoadGraph(nodes, edges)


def degree_histogram(g: RoadGraph) -> dict[int, int]:
    """Map degree -> number of nodes with that degree; counts sum to |V|."""
    hist: dict[int, int] = {}
    for nid in range(len(g.nodes)):
        d = len(g.adjacency[nid])
        hist[d] = hist.get(d, 0) + 1
    return dict(sorted(hist.items()))


def graph_to_json(g: RoadGraph) -> str:
    """Serialize to the stable {"nodes": [[id,x,y],...], "edges": [[a,b,len],...]} form."""
    obj = {
        "nodes": [[nid, x, y] for nid, x, y in g.nodes],
        "edges": [[a, b, length] for a, b, length in g.edges],
    }
    return json.dumps(obj, separators=(",", ":"))


def graph_from_json(text: str) -> RoadGraph:
    obj = json.loads(text)
    nodes = tuple((int(i), float(x), float(y)) for i, x, y in obj["nodes"])
    edges = tuple((int(a), int(b), float(ln)) for a, b, ln in obj["edges"])
    return RoadGraph(nodes, edges)
