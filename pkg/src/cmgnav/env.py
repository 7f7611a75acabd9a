"""Synthetic navigation graphs standing in for scanned indoor environments.

Each node has 2-D coordinates (meters) and a landmark tag.  The agent observes a
node through its ordered navigable directions: index 0 is STOP (all-zero
feature, no neighbor) and indices 1.. are the neighbors sorted by heading.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STOP = 0
HEADING_WIDTH = 4


class GraphValidationError(ValueError):
    pass


def landmark_prototypes(n_landmarks: int, width: int, seed: int = 0) -> np.ndarray:
    """Landmark appearance table shared by every generated graph."""
    return np.random.default_rng(seed).standard_normal((n_landmarks, width))


def heading(a, b) -> float:
    return math.atan2(b[1] - a[1], b[0] - a[0])


def order_directions(coords: np.ndarray, node: int, neighbors) -> list[int]:
    """Neighbors sorted counter-clockwise from east, ties broken by id."""
    def key(n):
        return (round(heading(coords[node], coords[n]) % (2 * math.pi), 12), n)
    return sorted(neighbors, key=key)


@dataclass(eq=False)
class NavGraph:
    graph_id: str
    coords: np.ndarray                 # (n, 2) meters
    edges: list[tuple[int, int]]
    landmarks: list[int]               # landmark tag per node
    directions: list[list[int]]        # directions[node][k-1] = neighbor of direction k
    features: list[np.ndarray]         # features[node]: (1 + degree, D), row 0 = STOP
    k_max: int
    seed: int | None = None
    _dist: dict = field(default_factory=dict, repr=False)
    _padded: tuple | None = field(default=None, repr=False)
    _oracle: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def feature_dim(self) -> int:
        return self.features[0].shape[1]

    def n_directions(self, node: int) -> int:
        return len(self.directions[node]) + 1

    def neighbor(self, node: int, direction: int) -> int:
        if not 1 <= direction < self.n_directions(node):
            raise IndexError(f"direction {direction} invalid at node {node}")
        return self.directions[node][direction - 1]

    def weight(self, a: int, b: int) -> float:
        return float(np.hypot(*(self.coords[a] - self.coords[b])))

    def _check_node(self, n: int) -> None:
        if not (isinstance(n, (int, np.integer)) and 0 <= n < self.n_nodes):
            raise KeyError(f"unknown node id {n!r} in graph {self.graph_id}")

    def distances_from(self, source: int) -> np.ndarray:
        """Dijkstra distances from ``source`` to every node (cached)."""
        self._check_node(source)
        d = self._dist.get(source)
        if d is None:
            d = np.full(self.n_nodes, np.inf)
            d[source] = 0.0
            heap = [(0.0, source)]
            while heap:
                du, u = heapq.heappop(heap)
                if du > d[u]:
                    continue
                for v in self.directions[u]:
                    nd = du + self.weight(u, v)
                    if nd < d[v]:
                        d[v] = nd
                        heapq.heappush(heap, (nd, v))
            self._dist[source] = d
        return d

    def padded_features(self) -> tuple[np.ndarray, np.ndarray]:
        """(n, k_max+1, D) features and (n, k_max+1) direction masks."""
        if self._padded is None:
            K = self.k_max + 1
            feats = np.zeros((self.n_nodes, K, self.feature_dim))
            mask = np.zeros((self.n_nodes, K), dtype=bool)
            for n, f in enumerate(self.features):
                feats[n, :len(f)] = f
                mask[n, :len(f)] = True
            self._padded = (feats, mask)
        return self._padded

    def hop_diameter(self) -> int:
        best = 0
        for s in range(self.n_nodes):
            seen = {s: 0}
            frontier = [s]
            while frontier:
                nxt = []
                for u in frontier:
                    for v in self.directions[u]:
                        if v not in seen:
                            seen[v] = seen[u] + 1
                            nxt.append(v)
                frontier = nxt
            best = max(best, max(seen.values()))
        return best

    def validate(self) -> None:
        n = self.n_nodes
        if n < 2:
            raise GraphValidationError("graph needs at least 2 nodes")
        if len(self.landmarks) != n or len(self.directions) != n or len(self.features) != n:
            raise GraphValidationError("per-node arrays disagree with node count")
        adj = [set() for _ in range(n)]
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise GraphValidationError(f"bad edge ({a}, {b})")
            adj[a].add(b)
            adj[b].add(a)
        width = self.features[0].shape[1]
        for node in range(n):
            dirs = self.directions[node]
            if len(set(dirs)) != len(dirs):
                raise GraphValidationError(f"node {node}: directions repeat a neighbor")
            if set(dirs) != adj[node]:
                raise GraphValidationError(f"node {node}: directions do not match incident edges")
            if len(dirs) > self.k_max:
                raise GraphValidationError(f"node {node}: {len(dirs)} directions exceed k_max={self.k_max}")
            f = self.features[node]
            if f.shape != (len(dirs) + 1, width):
                raise GraphValidationError(f"node {node}: feature array shape {f.shape}, "
                                           f"expected {(len(dirs) + 1, width)}")
            if np.any(f[STOP] != 0.0):
                raise GraphValidationError(f"node {node}: STOP feature vector is not all-zero")
            if not np.isfinite(f).all():
                raise GraphValidationError(f"node {node}: non-finite feature values")
        seen = {0}
        frontier = [0]
        while frontier:
            u = frontier.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    frontier.append(v)
        if len(seen) != n:
            raise GraphValidationError(f"graph is not connected ({len(seen)}/{n} nodes reachable)")

    # -- serialisation -----------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "graph_id": self.graph_id,
            "nodes": [{"id": i, "x": float(x), "y": float(y), "landmark": int(self.landmarks[i])}
                      for i, (x, y) in enumerate(self.coords)],
            "edges": [[int(a), int(b)] for a, b in self.edges],
            "feature_dim": int(self.feature_dim),
            "features": {str(n): {str(k): [float(v) for v in row] for k, row in enumerate(f)}
                         for n, f in enumerate(self.features)},
            "k_max": int(self.k_max),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict, graph_id: str | None = None) -> "NavGraph":
        try:
            nodes = sorted(d["nodes"], key=lambda r: r["id"])
            if [r["id"] for r in nodes] != list(range(len(nodes))):
                raise GraphValidationError("node ids must be 0..n-1")
            coords = np.array([[r["x"], r["y"]] for r in nodes], dtype=np.float64)
            landmarks = [int(r["landmark"]) for r in nodes]
            edges = [(int(a), int(b)) for a, b in d["edges"]]
            width = int(d["feature_dim"])
            k_max = int(d["k_max"])
            adj = [[] for _ in nodes]
            for a, b in edges:
                if not (0 <= a < len(nodes) and 0 <= b < len(nodes)):
                    raise GraphValidationError(f"edge ({a}, {b}) references unknown node")
                adj[a].append(b)
                adj[b].append(a)
            directions = [order_directions(coords, i, adj[i]) for i in range(len(nodes))]
            features = []
            for i in range(len(nodes)):
                per = d["features"].get(str(i))
                if per is None:
                    raise GraphValidationError(f"node {i}: missing features")
                if sorted(int(k) for k in per) != list(range(len(per))):
                    raise GraphValidationError(f"node {i}: direction keys must be 0..k")
                rows = [per[str(k)] for k in range(len(per))]
                if any(len(r) != width for r in rows):
                    raise GraphValidationError(f"node {i}: feature width differs from feature_dim={width}")
                features.append(np.array(rows, dtype=np.float64).reshape(len(rows), width))
        except (KeyError, TypeError) as exc:
            raise GraphValidationError(f"malformed environment file: {exc}") from exc
        g = cls(graph_id or d.get("graph_id", "graph"), coords, edges, landmarks, directions,
                features, k_max, d.get("seed"))
        g.validate()
        return g

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "NavGraph":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), graph_id=None)


def build_features(coords: np.ndarray, directions: list[list[int]], landmarks: list[int],
                   feature_dim: int, rng: np.random.Generator, prototypes: np.ndarray,
                   noise: float) -> list[np.ndarray]:
    lm_width = feature_dim - HEADING_WIDTH
    out = []
    for node, dirs in enumerate(directions):
        f = np.zeros((len(dirs) + 1, feature_dim))
        for k, nb in enumerate(dirs, start=1):
            theta = heading(coords[node], coords[nb])
            dist = float(np.hypot(*(coords[nb] - coords[node])))
            f[k, :lm_width] = prototypes[landmarks[nb]] + noise * rng.standard_normal(lm_width)
            f[k, lm_width:] = (math.cos(theta), math.sin(theta), dist, 1.0)
        out.append(f)
    return out


def generate_graph(n_nodes: int, k_max: int, feature_dim: int, rng: np.random.Generator,
                   n_landmarks: int = 20, spacing: float = 2.2, landmark_noise: float = 0.3,
                   landmark_seed: int = 0, graph_id: str = "graph", seed: int | None = None) -> NavGraph:
    """Random geometric graph with a degree-capped spanning tree for connectivity.

    Nodes are scattered over a square whose side grows with sqrt(n_nodes) so the
    typical edge is about ``spacing`` meters.
    """
    if n_nodes < 2:
        raise ValueError("n_nodes must be >= 2")
    if k_max < 2 and n_nodes > 2:
        raise ValueError("k_max must be >= 2")
    if k_max < 1 or k_max > n_nodes - 1:
        raise ValueError(f"k_max={k_max} infeasible for {n_nodes} nodes")
    if feature_dim <= HEADING_WIDTH:
        raise ValueError(f"feature_dim must exceed {HEADING_WIDTH}")

    side = spacing * math.sqrt(n_nodes)
    min_sep = 0.45 * spacing
    pts: list[np.ndarray] = []
    attempts = 0
    while len(pts) < n_nodes:
        p = rng.uniform(0.0, side, size=2)
        attempts += 1
        if attempts < 200 * n_nodes and any(np.hypot(*(p - q)) < min_sep for q in pts):
            continue
        pts.append(p)
    coords = np.array(pts)
    dist = np.hypot(*(coords[:, None, :] - coords[None, :, :]).transpose(2, 0, 1))

    deg = np.zeros(n_nodes, dtype=int)
    edges: set[tuple[int, int]] = set()
    in_tree = np.zeros(n_nodes, dtype=bool)
    in_tree[0] = True
    # Prim's algorithm restricted to tree nodes with spare degree; a fresh leaf
    # always has spare degree when k_max >= 2, so this never stalls.
    for _ in range(n_nodes - 1):
        cand = dist.copy()
        cand[~in_tree, :] = np.inf
        cand[:, in_tree] = np.inf
        cand[deg >= k_max, :] = np.inf
        u, v = np.unravel_index(np.argmin(cand), cand.shape)
        edges.add((min(u, v), max(u, v)))
        deg[u] += 1
        deg[v] += 1
        in_tree[v] = True

    radius = 1.6 * spacing
    iu, ju = np.triu_indices(n_nodes, 1)
    order = np.argsort(dist[iu, ju], kind="stable")
    for idx in order:
        a, b = int(iu[idx]), int(ju[idx])
        if dist[a, b] > radius:
            break
        if (a, b) in edges or deg[a] >= k_max or deg[b] >= k_max:
            continue
        edges.add((a, b))
        deg[a] += 1
        deg[b] += 1

    edge_list = sorted((int(a), int(b)) for a, b in edges)
    adj = [[] for _ in range(n_nodes)]
    for a, b in edge_list:
        adj[a].append(b)
        adj[b].append(a)
    directions = [order_directions(coords, i, adj[i]) for i in range(n_nodes)]
    landmarks = [int(x) for x in rng.integers(0, n_landmarks, size=n_nodes)]
    protos = landmark_prototypes(n_landmarks, feature_dim - HEADING_WIDTH, landmark_seed)
    features = build_features(coords, directions, landmarks, feature_dim, rng, protos, landmark_noise)
    g = NavGraph(graph_id, coords, edge_list, landmarks, directions, features, k_max, seed)
    g.validate()
    return g


def make_graph(coords, edges, landmarks=None, feature_dim: int = 8, k_max: int | None = None,
               rng: np.random.Generator | None = None, graph_id: str = "graph",
               landmark_noise: float = 0.0, n_landmarks: int = 20) -> NavGraph:
    """Build a validated graph from explicit coordinates and edges."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    edge_list = sorted((min(int(a), int(b)), max(int(a), int(b))) for a, b in edges)
    adj = [[] for _ in range(n)]
    for a, b in edge_list:
        adj[a].append(b)
        adj[b].append(a)
    directions = [order_directions(coords, i, adj[i]) for i in range(n)]
    landmarks = list(range(n)) if landmarks is None else [int(x) for x in landmarks]
    if k_max is None:
        k_max = max(len(d) for d in directions)
    protos = landmark_prototypes(max(n_landmarks, max(landmarks) + 1), feature_dim - HEADING_WIDTH)
    features = build_features(coords, directions, landmarks, feature_dim,
                              rng or np.random.default_rng(0), protos, landmark_noise)
    g = NavGraph(graph_id, coords, edge_list, landmarks, directions, features, k_max)
    g.validate()
    return g


def shortest_distance(g: NavGraph, a: int, b: int) -> float:
    g._check_node(b)
    return float(g.distances_from(a)[b])


def oracle_action(g: NavGraph, current: int, goal: int) -> int:
    """First direction of a shortest path to ``goal``; STOP when already there."""
    key = (current, goal)
    cached = g._oracle.get(key)
    if cached is not None:
        return cached
    g._check_node(current)
    to_goal = g.distances_from(goal)
    best, best_cost = STOP, math.inf
    if current != goal:
        for k, nb in enumerate(g.directions[current], start=1):
            cost = g.weight(current, nb) + to_goal[nb]
            if cost < best_cost - 1e-9:
                best, best_cost = k, cost
    g._oracle[key] = best
    return best


def oracle_path(g: NavGraph, start: int, goal: int) -> list[int]:
    path = [start]
    while path[-1] != goal:
        path.append(g.neighbor(path[-1], oracle_action(g, path[-1], goal)))
        if len(path) > g.n_nodes:
            raise RuntimeError("oracle path did not terminate")
    return path


@dataclass(frozen=True)
class EpisodeState:
    graph: NavGraph
    node: int
    t_max: int
    steps_taken: int = 0
    done: bool = False


def start_episode(g: NavGraph, node: int, t_max: int) -> EpisodeState:
    g._check_node(node)
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    return EpisodeState(g, int(node), int(t_max))


def default_t_max(reference_hops: int) -> int:
    return max(10, 2 * reference_hops)


def step(state: EpisodeState, action: int) -> EpisodeState:
    if state.done:
        raise RuntimeError("step() on a finished episode")
    if not 0 <= action < state.graph.n_directions(state.node):
        raise IndexError(f"direction {action} out of range at node {state.node}")
    taken = state.steps_taken + 1
    if action == STOP:
        return dataclasses.replace(state, steps_taken=taken, done=True)
    node = state.graph.neighbor(state.node, action)
    return dataclasses.replace(state, node=node, steps_taken=taken, done=taken >= state.t_max)
