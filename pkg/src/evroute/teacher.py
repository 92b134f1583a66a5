"""Budgeted A* teacher over (node, SoC bucket) states, plus an exhaustive oracle.

Search model shared by :func:`plan` and :func:`oracle_optimal`:

* SoC is tracked in buckets of ``cfg.soc_bucket_pct`` and always rounded
  down, so a discretely feasible path is feasible in continuous SoC too.
* Driving edge (i, j) costs ``w_t*T + w_e*E + w_c*p*E`` with T in minutes;
  edges whose SoC drop exceeds the current SoC are pruned.
* At a charger below the cap, an optional "charge" transition raises SoC
  to ``cfg.charge_cap_pct`` and costs ``w_t * dwell_minutes``.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

from .charging import ChargeCurve, charge_time_min, default_curve
from .energy import VehicleParams, min_energy_per_km_kwh, segment_cost
from .errors import InvalidArgument, NoNeighbors
from .road_graph import RoadGraph

N_MOVE_SLOTS = 8
CHARGE = 8  # action index of the charge action


@dataclass(frozen=True)
class TeacherConfig:
    w_t: float = 1.0
    w_e: float = 0.0
    w_c: float = 0.0
    tariff_p: float = 0.0
    tariff_p_min: float = 0.0
    v_max_kmh: float | None = None  # None: fastest edge in the graph
    n_exp: int = 100_000
    replan_period: int = 1
    soc_bucket_pct: float = 1.0
    charge_cap_pct: float = 80.0

    def __post_init__(self):
        if min(self.w_t, self.w_e, self.w_c, self.tariff_p, self.tariff_p_min) < 0:
            raise InvalidArgument("weights and tariffs must be >= 0")
        if self.tariff_p_min > self.tariff_p:
            raise InvalidArgument("tariff_p_min must not exceed tariff_p")
        if self.n_exp < 1 or self.replan_period < 1:
            raise InvalidArgument("n_exp and replan_period must be >= 1")
        if not 0 < self.soc_bucket_pct <= 100 or not 0 < self.charge_cap_pct <= 100:
            raise InvalidArgument("bad SoC bucket or charge cap")


@dataclass(frozen=True)
class TeacherPlan:
    """Result of a teacher search.

    ``path`` always starts at the query node; a single-node path means no
    movement. ``charge_idx`` lists positions in ``path`` where the plan
    charges to the cap before leaving. ``cost`` is ``inf`` when infeasible,
    in which case ``path`` is the best-effort prefix found.
    """

    path: tuple[int, ...]
    cost: float
    feasible: bool
    expansions_used: int
    charge_idx: tuple[int, ...] = field(default=())

    @property
    def empty(self) -> bool:
        return len(self.path) < 2 and not self.charge_idx


def _v_max(g: RoadGraph, cfg: TeacherConfig) -> float:
    vmax = cfg.v_max_kmh if cfg.v_max_kmh is not None else g.max_speed_kmh
    if g.n_edges and vmax < g.max_speed_kmh:
        raise InvalidArgument(f"v_max {vmax} below the fastest edge speed {g.max_speed_kmh}")
    return vmax if vmax > 0 else 1.0


def heuristic(g: RoadGraph, node: int, goal: int, cfg: TeacherConfig, params: VehicleParams) -> float:
    """Lower bound on cost-to-go from straight-line distance.

    Time is bounded by driving at ``v_max``. Energy is bounded by the
    cheapest cruise energy per km at any speed up to ``v_max``; above about
    40 km/h cruise energy grows with speed, so the value at ``v_max`` alone
    would overestimate.
    """
    d = g.distance_km(node, goal)
    if d == 0.0:
        return 0.0
    vmax = _v_max(g, cfg)
    h = cfg.w_t * 60.0 * d / vmax
    k = cfg.w_e + cfg.w_c * cfg.tariff_p_min
    if k:
        h += k * d * min_energy_per_km_kwh(vmax, params)
    return h


class _Model:
    """Per-call precomputation of edge costs, SoC drops and the heuristic table."""

    def __init__(self, g, cfg, params, goal, curve):
        self.g, self.cfg = g, cfg
        self.bucket = cfg.soc_bucket_pct
        self.k_cap = int(math.floor(cfg.charge_cap_pct / self.bucket + 1e-9))
        self.curve = curve or default_curve()
        price = cfg.w_e + cfg.w_c * cfg.tariff_p
        self.out = []
        for v in range(len(g)):
            row = []
            for e in g.adjacency[v]:
                sc = segment_cost(e, params)
                row.append((e.dst, cfg.w_t * 60.0 * sc.time_h + price * sc.energy_kwh, sc.soc_drop_pct))
            self.out.append(row)
        self.h = [heuristic(g, v, goal, cfg, params) for v in range(len(g))] if goal is not None else None

    def k_of(self, soc):
        return int(math.floor(soc / self.bucket + 1e-9))

    def successors(self, v, k):
        soc = k * self.bucket
        if self.g.is_charger(v) and k < self.k_cap:
            dwell = charge_time_min(self.curve, soc, self.k_cap * self.bucket)
            yield v, self.k_cap, self.cfg.w_t * dwell, True
        for u, c, drop in self.out[v]:
            rest = soc - drop
            if rest < 0:
                continue
            yield u, self.k_of(rest), c, False


def _unwind(parent, state):
    path, charges = [], []
    moves = []
    while state is not None:
        prev, charged = parent[state]
        moves.append((state, charged))
        state = prev
    moves.reverse()
    for (v, _), charged in moves:
        if charged:
            charges.append(len(path) - 1)
        else:
            path.append(v)
    return tuple(path), tuple(charges)


def _check_query(g, start, goal, soc0):
    g.check(start)
    g.check(goal)
    if not 0.0 <= soc0 <= 100.0:
        raise InvalidArgument(f"soc0={soc0} outside [0, 100]")


def plan(
    g: RoadGraph,
    cfg: TeacherConfig,
    params: VehicleParams,
    start: int,
    goal: int,
    soc0: float,
    curve: ChargeCurve | None = None,
) -> TeacherPlan:
    """A* from ``start`` to ``goal`` capped at ``cfg.n_exp`` expansions."""
    _check_query(g, start, goal, soc0)
    if start == goal:
        return TeacherPlan((start,), 0.0, True, 0)
    m = _Model(g, cfg, params, goal, curve)
    s0 = (start, m.k_of(soc0))
    best_g = {s0: 0.0}
    parent = {s0: (None, False)}
    heap = [(m.h[start], start, s0[1], 0.0)]
    closed = set()
    expansions = 0
    frontier_best = (m.h[start], 0.0, s0)
    while heap:
        f, v, k, gv = heapq.heappop(heap)
        state = (v, k)
        if state in closed or gv > best_g[state]:
            continue
        if v == goal:
            path, charges = _unwind(parent, state)
            return TeacherPlan(path, gv, True, expansions, charges)
        if expansions >= cfg.n_exp:
            break
        closed.add(state)
        expansions += 1
        if (m.h[v], gv) < frontier_best[:2]:
            frontier_best = (m.h[v], gv, state)
        for u, k2, c, charged in m.successors(v, k):
            nxt = (u, k2)
            ng = gv + c
            if nxt in closed or ng >= best_g.get(nxt, math.inf):
                continue
            best_g[nxt] = ng
            parent[nxt] = (state, charged)
            heapq.heappush(heap, (ng + m.h[u], u, k2, ng))
    path, charges = _unwind(parent, frontier_best[2])
    return TeacherPlan(path, math.inf, False, expansions, charges)


def oracle_optimal(
    g: RoadGraph,
    cfg: TeacherConfig,
    params: VehicleParams,
    start: int,
    goal: int,
    soc0: float,
    curve: ChargeCurve | None = None,
) -> TeacherPlan:
    """Exhaustive label-correcting search over the same state space, no budget.

    Meant for test-scale graphs (tens of nodes).
    """
    _check_query(g, start, goal, soc0)
    if start == goal:
        return TeacherPlan((start,), 0.0, True, 0)
    m = _Model(g, cfg, params, None, curve)
    s0 = (start, m.k_of(soc0))
    dist = {s0: 0.0}
    parent = {s0: (None, False)}
    queue = deque([s0])
    queued = {s0}
    work = 0
    while queue:
        state = queue.popleft()
        queued.discard(state)
        work += 1
        if state[0] == goal:
            continue
        dv = dist[state]
        for u, k2, c, charged in m.successors(*state):
            nxt = (u, k2)
            nd = dv + c
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                parent[nxt] = (state, charged)
                if nxt not in queued:
                    queue.append(nxt)
                    queued.add(nxt)
    goals = [(d, s) for s, d in dist.items() if s[0] == goal]
    if not goals:
        return TeacherPlan((start,), math.inf, False, work)
    d, s = min(goals, key=lambda t: (t[0], t[1][1]))
    path, charges = _unwind(parent, s)
    return TeacherPlan(path, d, True, work, charges)


def plan_cost(g, cfg, params, path, charge_idx, soc0, curve=None) -> float:
    """Re-cost a plan by walking it through the discrete SoC model; ``inf`` if infeasible."""
    m = _Model(g, cfg, params, None, curve)
    k = m.k_of(soc0)
    total = 0.0
    charges = set(charge_idx)
    for i, v in enumerate(path):
        if i in charges:
            if not g.is_charger(v) or k >= m.k_cap:
                return math.inf
            total += cfg.w_t * charge_time_min(m.curve, k * m.bucket, m.k_cap * m.bucket)
            k = m.k_cap
        if i + 1 < len(path):
            hit = [(c, drop) for u, c, drop in m.out[v] if u == path[i + 1]]
            if not hit:
                return math.inf
            c, drop = hit[0]
            if k * m.bucket - drop < 0:
                return math.inf
            total += c
            k = m.k_of(k * m.bucket - drop)
    return total


def move_slots(g: RoadGraph, v: int) -> list[int]:
    """Destination node of each movement slot (first eight neighbours by id)."""
    return [e.dst for e in g.adjacency[v][:N_MOVE_SLOTS]]


def shortlist(p: TeacherPlan, current: int, g: RoadGraph) -> frozenset[int]:
    """Movement slots whose neighbour lies anywhere on the cached plan.

    When the plan charges at ``current`` before leaving, the charge action
    is included as well.
    """
    if not p.feasible or p.empty or p.path[0] != current:
        return frozenset()
    on_path = set(p.path)
    slots = {k for k, u in enumerate(move_slots(g, current)) if u in on_path}
    if 0 in p.charge_idx:
        slots.add(CHARGE)
    return frozenset(slots)


def greedy_hint(g: RoadGraph, current: int, goal: int) -> int:
    """Slot of the neighbour closest to the goal; ties go to the lowest node id."""
    dests = move_slots(g, current)
    if not dests:
        raise NoNeighbors(f"node {current} has no outgoing edges")
    return min(range(len(dests)), key=lambda k: (g.distance_km(dests[k], goal), dests[k]))


def teacher_action(p: TeacherPlan, current: int, g: RoadGraph, goal: int) -> int:
    """Single action the teacher would execute: charge, next plan hop, any shortlist slot, else the greedy hint."""
    s = shortlist(p, current, g)
    if CHARGE in s:
        return CHARGE
    dests = move_slots(g, current)
    if len(p.path) > 1 and p.path[1] in dests and dests.index(p.path[1]) in s:
        return dests.index(p.path[1])
    if s:
        return min(s)
    return greedy_hint(g, current, goal)
