"""Detector network and travel-time weighted adjacency.

Units are fixed at the API boundary: distances in miles, speeds in mph,
travel times in minutes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .autodiff import ShapeError

SPEED_FLOOR_MPH = 5.0
EARTH_RADIUS_MILES = 3958.8


class Direction(str, enum.Enum):
    NB = "NB"
    SB = "SB"
    EB = "EB"
    WB = "WB"

    @property
    def increasing(self) -> bool:
        """True when travel runs toward increasing mileposts."""
        return self in (Direction.NB, Direction.EB)


@dataclass(frozen=True)
class DetectorNode:
    detector_id: str
    corridor: str
    direction: Direction
    milepost: float
    lane_count: int = 1
    latitude: float = 0.0
    longitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.lane_count < 1:
            raise ValueError(f"detector {self.detector_id}: lane_count must be >= 1")


@dataclass(frozen=True)
class RoadGraph:
    """Immutable detector graph. Node order is the index order of every tensor."""

    nodes: tuple[DetectorNode, ...]
    edges: tuple[tuple[int, int], ...]
    distances: dict = field(hash=False)

    def __post_init__(self):
        ids = [n.detector_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("detector_id values must be unique")
        n = len(self.nodes)
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) references a missing node")
            if i == j:
                raise ValueError(f"self-edge on node {i}")
            if not self.distances.get((i, j), 0.0) > 0:
                raise ValueError(f"edge ({i}, {j}) needs a positive distance")

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def ids(self) -> list[str]:
        return [n.detector_id for n in self.nodes]

    def index_of(self, detector_id: str) -> int:
        return self._index()[detector_id]

    def _index(self) -> dict[str, int]:
        cache = self.__dict__.get("_idx")
        if cache is None:
            cache = {n.detector_id: i for i, n in enumerate(self.nodes)}
            object.__setattr__(self, "_idx", cache)
        return cache

    @property
    def lanes(self) -> np.ndarray:
        return np.array([n.lane_count for n in self.nodes], dtype=np.float64)

    @property
    def coordinates(self) -> np.ndarray:
        return np.array([[n.latitude, n.longitude] for n in self.nodes], dtype=np.float64)

    def edge_mask(self) -> np.ndarray:
        mask = np.zeros((self.size, self.size), dtype=bool)
        for i, j in self.edges:
            mask[i, j] = True
        return mask

    def distance_matrix(self) -> np.ndarray:
        d = np.zeros((self.size, self.size))
        for (i, j), dist in self.distances.items():
            d[i, j] = dist
        return d

    @classmethod
    def from_nodes(
        cls,
        nodes: Sequence[DetectorNode],
        explicit_edges: Iterable[tuple[str, str, float]] | None = None,
    ) -> "RoadGraph":
        """Build a graph, inferring edges between consecutive detectors of a corridor.

        Explicit ``(from_id, to_id, distance_miles)`` triples replace inference entirely.
        """
        nodes = tuple(nodes)
        index = {n.detector_id: i for i, n in enumerate(nodes)}
        distances: dict[tuple[int, int], float] = {}
        if explicit_edges is not None:
            for src, dst, dist in explicit_edges:
                try:
                    distances[(index[src], index[dst])] = float(dist)
                except KeyError as err:
                    raise ValueError(f"edge references unknown detector {err.args[0]}") from None
        else:
            groups: dict[tuple[str, Direction], list[int]] = {}
            for i, n in enumerate(nodes):
                groups.setdefault((n.corridor, n.direction), []).append(i)
            for (_, direction), members in groups.items():
                members.sort(key=lambda k: nodes[k].milepost, reverse=not direction.increasing)
                for a, b in zip(members, members[1:]):
                    dist = abs(nodes[b].milepost - nodes[a].milepost)
                    if dist <= 0:
                        raise ValueError(
                            f"detectors {nodes[a].detector_id} and {nodes[b].detector_id} share a milepost"
                        )
                    distances[(a, b)] = dist
        edges = tuple(sorted(distances))
        return cls(nodes, edges, distances)

    def permuted(self, perm: Sequence[int]) -> "RoadGraph":
        """Graph with node ``k`` of the result equal to node ``perm[k]`` of this one."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        nodes = tuple(self.nodes[p] for p in perm)
        distances = {(inv[i], inv[j]): d for (i, j), d in self.distances.items()}
        return RoadGraph(nodes, tuple(sorted(distances)), distances)


def haversine_miles(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_MILES * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def travel_time(d, s_i, s_j, floor: float = SPEED_FLOOR_MPH):
    """Minutes to cover ``d`` miles at the mean of two detector speeds.

    Speeds below ``floor`` are raised to it. Works elementwise on arrays.
    """
    d = np.asarray(d, dtype=np.float64)
    s_i = np.asarray(s_i, dtype=np.float64)
    s_j = np.asarray(s_j, dtype=np.float64)
    if np.any(d < 0) or np.any(s_i < 0) or np.any(s_j < 0):
        raise ValueError("distance and speeds must be non-negative")
    if np.any(d == 0):
        raise ValueError("distance must be positive")
    mean_speed = (np.maximum(s_i, floor) + np.maximum(s_j, floor)) / 2.0
    out = 60.0 * d / mean_speed
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DynamicAdjacency:
    matrix: np.ndarray
    timestep: object = None


def build_adjacency(
    graph: RoadGraph,
    speeds,
    timestep=None,
    symmetric: bool = False,
    floor: float = SPEED_FLOOR_MPH,
) -> DynamicAdjacency:
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.shape != (graph.size,):
        raise ShapeError(f"expected {graph.size} speeds, got shape {speeds.shape}")
    return DynamicAdjacency(adjacency_series(graph, speeds[None], symmetric, floor)[0], timestep)


def adjacency_series(graph: RoadGraph, speeds, symmetric: bool = False, floor: float = SPEED_FLOOR_MPH) -> np.ndarray:
    """Travel-time adjacency for every row of a ``T x N`` speed array -> ``T x N x N``."""
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.ndim != 2 or speeds.shape[1] != graph.size:
        raise ShapeError(f"speeds must be T x {graph.size}, got {speeds.shape}")
    out = np.zeros((speeds.shape[0], graph.size, graph.size))
    if graph.edges:
        src = np.array([e[0] for e in graph.edges])
        dst = np.array([e[1] for e in graph.edges])
        dist = np.array([graph.distances[e] for e in graph.edges])
        out[:, src, dst] = travel_time(dist[None, :], speeds[:, src], speeds[:, dst], floor)
    if symmetric:
        out = np.maximum(out, np.swapaxes(out, 1, 2))
    return out


def normalize_adjacency(adjacency, tau: float = 1.0, mode: str = "affinity") -> np.ndarray:
    """Row-stochastic convolution matrix from travel-time adjacency.

    ``affinity`` weights an edge by ``exp(-tt / tau)``; ``raw`` uses the travel
    time itself. A unit self-loop is added before row normalization. Accepts a
    single ``N x N`` matrix, a :class:`DynamicAdjacency`, or a ``T x N x N`` stack.
    """
    a = adjacency.matrix if isinstance(adjacency, DynamicAdjacency) else np.asarray(adjacency, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = a.shape[-1]
    support = a > 0
    if mode == "affinity":
        w = np.where(support, np.exp(-a / tau), 0.0)
    elif mode == "raw":
        w = np.where(support, a, 0.0)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    w = w + np.eye(n)
    return w / w.sum(axis=-1, keepdims=True)


def median_edge_travel_time(graph: RoadGraph, speeds) -> float:
    """Median over timesteps and edges of the travel time; the default affinity scale."""
    if not graph.edges:
        return 1.0
    tt = adjacency_series(graph, np.atleast_2d(speeds))
    mask = graph.edge_mask()
    return float(np.median(tt[:, mask]))


def shortest_path_miles(graph: RoadGraph) -> np.ndarray:
    """All-pairs shortest path distance over the undirected road graph (inf when unreachable)."""
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import shortest_path

    d = graph.distance_matrix()
    d = np.maximum(d, d.T)
    return shortest_path(csr_matrix(d), directed=False)


GRAPH_COLUMNS = ["detector_id", "corridor", "direction", "milepost_miles", "lane_count", "latitude", "longitude"]


def read_graph_csv(path, edges_path=None) -> RoadGraph:
    df = pd.read_csv(path, dtype={"detector_id": str, "corridor": str, "direction": str}, float_precision="round_trip")
    missing = [c for c in GRAPH_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    nodes = [
        DetectorNode(
            r.detector_id, r.corridor, Direction(r.direction), float(r.milepost_miles),
            int(r.lane_count), float(r.latitude), float(r.longitude),
        )
        for r in df.itertuples(index=False)
    ]
    explicit = None
    if edges_path is not None and Path(edges_path).exists():
        e = pd.read_csv(edges_path, dtype={"from_id": str, "to_id": str}, float_precision="round_trip")
        explicit = list(zip(e.from_id, e.to_id, e.distance_miles))
    return RoadGraph.from_nodes(nodes, explicit)


def write_graph_csv(graph: RoadGraph, path) -> None:
    rows = [
        (n.detector_id, n.corridor, n.direction.value, n.milepost, n.lane_count, n.latitude, n.longitude)
        for n in graph.nodes
    ]
    pd.DataFrame(rows, columns=GRAPH_COLUMNS).to_csv(path, index=False)
