"""Charger-annotated directed road graph: types, JSON I/O, and synthetic generators."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, InvariantViolation, ParseError, UnknownNode

EARTH_RADIUS_KM = 6371.0
KM_PER_DEG = EARTH_RADIUS_KM * math.pi / 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise InvalidArgument(f"coordinates out of range: ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class Node:
    id: int
    pos: GeoPoint
    is_charger: bool = False


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    length_km: float
    speed_limit_kmh: float

    def __post_init__(self):
        if not self.length_km > 0 or not math.isfinite(self.length_km):
            raise InvariantViolation(f"edge {self.src}->{self.dst}: length_km must be > 0")
        if not self.speed_limit_kmh > 0 or not math.isfinite(self.speed_limit_kmh):
            raise InvariantViolation(f"edge {self.src}->{self.dst}: speed_kmh must be > 0")


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    return _haversine(a.lat, a.lon, b.lat, b.lon)


def _haversine(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(max(0.0, h))))


@dataclass(frozen=True, eq=False)
class RoadGraph:
    """Immutable directed graph with dense node ids ``0..n-1``.

    ``external_ids[i]`` keeps the id node ``i`` had in its source file.
    Adjacency lists are sorted by destination id; that order defines the
    action slots seen by the agent.
    """

    nodes: tuple[Node, ...]
    adjacency: tuple[tuple[Edge, ...], ...]
    external_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        n = len(self.nodes)
        if n == 0:
            raise InvariantViolation("graph must contain at least one node")
        if len(self.adjacency) != n:
            raise InvariantViolation("adjacency length does not match node count")
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise InvariantViolation(f"node ids must be dense, got {node.id} at {i}")
        for i, out in enumerate(self.adjacency):
            seen = set()
            for e in out:
                if e.src != i:
                    raise InvariantViolation(f"edge {e.src}->{e.dst} filed under node {i}")
                if not 0 <= e.dst < n:
                    raise InvariantViolation(f"edge {e.src}->{e.dst}: dangling endpoint")
                if e.dst == i:
                    raise InvariantViolation(f"edge {e.src}->{e.dst}: self-loop")
                if e.dst in seen:
                    raise InvariantViolation(f"edge {e.src}->{e.dst}: duplicate")
                seen.add(e.dst)
        ordered = tuple(tuple(sorted(out, key=lambda e: e.dst)) for out in self.adjacency)
        object.__setattr__(self, "adjacency", ordered)
        if not self.external_ids:
            object.__setattr__(self, "external_ids", tuple(range(n)))
        elif len(self.external_ids) != n or len(set(self.external_ids)) != n:
            raise InvariantViolation("external ids must be unique, one per node")

    @classmethod
    def build(cls, nodes: Sequence[Node], edges: Iterable[Edge], external_ids=()) -> "RoadGraph":
        adj: list[list[Edge]] = [[] for _ in nodes]
        for e in edges:
            if not (0 <= e.src < len(nodes)) or not (0 <= e.dst < len(nodes)):
                raise InvariantViolation(f"edge {e.src}->{e.dst}: dangling endpoint")
            adj[e.src].append(e)
        return cls(tuple(nodes), tuple(tuple(a) for a in adj), tuple(external_ids))

    def __len__(self):
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.adjacency)

    def edges(self):
        for out in self.adjacency:
            yield from out

    def check(self, v: int) -> None:
        if not isinstance(v, (int, np.integer)) or not 0 <= v < len(self.nodes):
            raise UnknownNode(f"unknown node {v!r}")

    def neighbors(self, v: int) -> list[tuple[int, Edge]]:
        self.check(v)
        return [(e.dst, e) for e in self.adjacency[v]]

    def edge(self, u: int, v: int) -> Edge:
        for e in self.adjacency[u]:
            if e.dst == v:
                return e
        raise InvariantViolation(f"no edge {u}->{v}")

    def pos(self, v: int) -> GeoPoint:
        return self.nodes[v].pos

    def is_charger(self, v: int) -> bool:
        return self.nodes[v].is_charger

    def distance_km(self, u: int, v: int) -> float:
        return haversine_km(self.nodes[u].pos, self.nodes[v].pos)

    @cached_property
    def chargers(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.is_charger)

    @cached_property
    def max_speed_kmh(self) -> float:
        return max((e.speed_limit_kmh for e in self.edges()), default=0.0)

    @cached_property
    def mean_edge_km(self) -> float:
        lengths = [e.length_km for e in self.edges()]
        return float(np.mean(lengths)) if lengths else 0.0

    @cached_property
    def bbox(self) -> tuple[float, float, float, float]:
        lats = [n.pos.lat for n in self.nodes]
        lons = [n.pos.lon for n in self.nodes]
        return min(lats), min(lons), max(lats), max(lons)

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        """All-pairs haversine distances in km (``n x n``)."""
        lat = np.radians([n.pos.lat for n in self.nodes])
        lon = np.radians([n.pos.lon for n in self.nodes])
        dphi = lat[None, :] - lat[:, None]
        dlmb = lon[None, :] - lon[:, None]
        h = np.sin(dphi / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlmb / 2) ** 2
        d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(np.maximum(0.0, h))))
        np.fill_diagonal(d, 0.0)
        d.setflags(write=False)
        return d

    @cached_property
    def _charger_dist(self) -> np.ndarray:
        if not self.chargers:
            return np.full(len(self.nodes), np.inf)
        return self.distance_matrix[:, list(self.chargers)].min(axis=1)

    def nearest_charger_km(self, v: int) -> float:
        """Haversine distance to the closest charger (``inf`` if none exist)."""
        return float(self._charger_dist[v])

    def nearest_node(self, p: GeoPoint) -> tuple[int, float]:
        best, best_d = 0, math.inf
        for n in self.nodes:
            d = haversine_km(p, n.pos)
            if d < best_d:
                best, best_d = n.id, d
        return best, best_d

    def to_dict(self) -> dict:
        ext = self.external_ids
        return {
            "nodes": [
                {"id": ext[n.id], "lat": n.pos.lat, "lon": n.pos.lon, "charger": n.is_charger}
                for n in self.nodes
            ],
            "edges": [
                {"from": ext[e.src], "to": ext[e.dst], "length_km": e.length_km, "speed_kmh": e.speed_limit_kmh}
                for e in self.edges()
            ],
        }


# -- file I/O ---------------------------------------------------------------

def _reject_constant(name):
    raise ValueError(f"non-finite number {name} not permitted")


def _field(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError("missing field", field=f"{where}.{key}")
    val = obj[key]
    if kind is bool:
        ok = isinstance(val, bool)
    elif kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    else:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val)
    if not ok:
        raise ParseError(f"expected {kind.__name__}, got {val!r}", field=f"{where}.{key}")
    return kind(val)


def graph_from_dict(data: dict) -> RoadGraph:
    if not isinstance(data, dict):
        raise ParseError("top-level value must be an object")
    raw_nodes = data.get("nodes")
    raw_edges = data.get("edges", [])
    if not isinstance(raw_nodes, list):
        raise ParseError("'nodes' must be a list", field="nodes")
    if not isinstance(raw_edges, list):
        raise ParseError("'edges' must be a list", field="edges")
    if not raw_nodes:
        raise InvariantViolation("graph must contain at least one node")

    index: dict[int, int] = {}
    nodes = []
    for i, rn in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        ext = _field(rn, "id", int, where)
        lat = _field(rn, "lat", float, where)
        lon = _field(rn, "lon", float, where)
        chg = _field(rn, "charger", bool, where) if isinstance(rn, dict) and "charger" in rn else False
        if ext in index:
            raise InvariantViolation(f"duplicate node id {ext}")
        try:
            pos = GeoPoint(lat, lon)
        except InvalidArgument as exc:
            raise InvariantViolation(f"{where}: {exc}") from None
        index[ext] = len(nodes)
        nodes.append(Node(len(nodes), pos, chg))

    edges = []
    for i, re_ in enumerate(raw_edges):
        where = f"edges[{i}]"
        a = _field(re_, "from", int, where)
        b = _field(re_, "to", int, where)
        length = _field(re_, "length_km", float, where)
        speed = _field(re_, "speed_kmh", float, where)
        if a not in index or b not in index:
            raise InvariantViolation(f"{where} ({a}->{b}): dangling endpoint")
        if a == b:
            raise InvariantViolation(f"{where} ({a}->{b}): self-loop")
        try:
            edges.append(Edge(index[a], index[b], length, speed))
        except InvariantViolation as exc:
            raise InvariantViolation(f"{where}: {exc}") from None
    return RoadGraph.build(nodes, edges, external_ids=tuple(index))


def load_graph(path) -> RoadGraph:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    return graph_from_dict(data)


def save_graph(g: RoadGraph, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1, allow_nan=False) + "\n", encoding="utf-8")


# -- generators -------------------------------------------------------------

def _link(nodes, a, b, speed, length=None):
    d = length if length is not None else haversine_km(nodes[a].pos, nodes[b].pos)
    return [Edge(a, b, d, speed), Edge(b, a, d, speed)]


def gen_corridor(
    n_nodes: int,
    hop_km: float,
    charger_every: int = 1,
    speed_kmh: float = 100.0,
    seed: int = 0,
    *,
    origin: GeoPoint = GeoPoint(0.0, 0.0),
    jitter_km: float = 0.0,
    chargers: Iterable[int] | None = None,
) -> RoadGraph:
    """Bidirectional chain of ``n_nodes`` spaced ``hop_km`` apart heading east.

    Every ``charger_every``-th node (from index 0) is a charger unless an
    explicit ``chargers`` collection is given; ``charger_every=0`` means none.
    With ``jitter_km > 0`` nodes are displaced north/south by a seeded
    uniform offset and edge lengths follow the true haversine distance.
    """
    if n_nodes < 2:
        raise InvalidArgument("n_nodes must be >= 2")
    if not hop_km > 0 or not speed_kmh > 0:
        raise InvalidArgument("hop_km and speed_kmh must be > 0")
    if charger_every < 0:
        raise InvalidArgument("charger_every must be >= 0")
    rng = np.random.default_rng(seed)
    dlon = hop_km / (KM_PER_DEG * math.cos(math.radians(origin.lat)))
    if origin.lon + dlon * (n_nodes - 1) > 180.0:
        raise InvalidArgument("corridor does not fit in longitude range from this origin")
    offsets = rng.uniform(-jitter_km, jitter_km, n_nodes) / KM_PER_DEG if jitter_km > 0 else np.zeros(n_nodes)
    flags = set(chargers) if chargers is not None else (
        set(range(0, n_nodes, charger_every)) if charger_every else set()
    )
    nodes = [
        Node(i, GeoPoint(origin.lat + float(offsets[i]), origin.lon + i * dlon), i in flags)
        for i in range(n_nodes)
    ]
    edges = []
    for i in range(n_nodes - 1):
        edges += _link(nodes, i, i + 1, speed_kmh, None if jitter_km > 0 else hop_km)
    return RoadGraph.build(nodes, edges)


def gen_grid(
    rows: int,
    cols: int,
    spacing_km: float = 10.0,
    charger_prob: float = 0.1,
    speed_kmh: float = 80.0,
    seed: int = 0,
    *,
    origin: GeoPoint = GeoPoint(40.0, -100.0),
) -> RoadGraph:
    """Bidirectional 4-connected grid, node id ``r * cols + c``; chargers drawn with ``charger_prob``."""
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise InvalidArgument("grid needs at least two nodes")
    if not spacing_km > 0 or not speed_kmh > 0:
        raise InvalidArgument("spacing_km and speed_kmh must be > 0")
    if not 0.0 <= charger_prob <= 1.0:
        raise InvalidArgument("charger_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    flags = rng.random(rows * cols) < charger_prob
    dlat = spacing_km / KM_PER_DEG
    dlon = spacing_km / (KM_PER_DEG * math.cos(math.radians(origin.lat)))
    nodes = [
        Node(r * cols + c, GeoPoint(origin.lat + r * dlat, origin.lon + c * dlon), bool(flags[r * cols + c]))
        for r in range(rows) for c in range(cols)
    ]
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges += _link(nodes, i, i + 1, speed_kmh)
            if r + 1 < rows:
                edges += _link(nodes, i, i + cols, speed_kmh)
    return RoadGraph.build(nodes, edges)


def gen_random(
    n_nodes: int,
    seed: int = 0,
    *,
    extent_km: float = 400.0,
    k_nearest: int = 3,
    charger_prob: float = 0.3,
    speeds=(60.0, 80.0, 100.0, 120.0),
    detour=(1.0, 1.3),
    one_way_prob: float = 0.2,
) -> RoadGraph:
    """Random geometric graph for property tests.

    Each node links to its ``k_nearest`` neighbours; edge length is the
    haversine distance times a seeded detour factor, so it never
    undercuts the straight-line distance.
    """
    if n_nodes < 1:
        raise InvalidArgument("n_nodes must be >= 1")
    rng = np.random.default_rng(seed)
    span = extent_km / KM_PER_DEG
    lat = 35.0 + rng.uniform(0, span, n_nodes)
    lon = -100.0 + rng.uniform(0, span, n_nodes)
    flags = rng.random(n_nodes) < charger_prob
    nodes = [Node(i, GeoPoint(float(lat[i]), float(lon[i])), bool(flags[i])) for i in range(n_nodes)]
    pairs = set()
    for i in range(n_nodes):
        d = sorted((haversine_km(nodes[i].pos, nodes[j].pos), j) for j in range(n_nodes) if j != i)
        for _, j in d[:k_nearest]:
            pairs.add((min(i, j), max(i, j)))
    edges = []
    for a, b in sorted(pairs):
        length = haversine_km(nodes[a].pos, nodes[b].pos) * rng.uniform(*detour)
        if length <= 0:
            continue
        speed = float(rng.choice(speeds))
        if rng.random() < one_way_prob:
            src, dst = (a, b) if rng.random() < 0.5 else (b, a)
            edges.append(Edge(src, dst, length, speed))
        else:
            edges += [Edge(a, b, length, speed), Edge(b, a, length, speed)]
    return RoadGraph.build(nodes, edges)
