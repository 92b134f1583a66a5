"""Episodic routing MDP on a road graph: 26-dim observations, 8 move slots + charge.

Reward terms are exposed as pure functions so they can be checked in
isolation; :class:`ChargeEnv` assembles them per transition.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .charging import ChargeCurve, charge_time_min, default_curve, soc_after_charging
from .energy import VehicleParams, segment_cost
from .errors import EpisodeDone, InvalidActionSlot, InvalidArgument, NoGoalAtDistance, UnknownStage
from .road_graph import RoadGraph
from .teacher import CHARGE, N_MOVE_SLOTS, TeacherConfig, move_slots
from .teacher import plan as teacher_plan

OBS_DIM = 26
N_ACTIONS = N_MOVE_SLOTS + 1

BASE_DISTANCES_KM = (10.0, 25.0, 50.0, 100.0, 200.0, 300.0)
# The long-range list repeats 200 km; as a set it adds seven new entries
# minus the duplicate, giving twelve stages that end at 3000 km.
EXPANDED_DISTANCES_KM = BASE_DISTANCES_KM + (400.0, 600.0, 1000.0, 1500.0, 2500.0, 3000.0)

SUCCESS, DEPLETED, TIMEOUT = "success", "depleted", "timeout"


def curriculum_distance(stage: int, expanded: bool = False) -> float:
    table = EXPANDED_DISTANCES_KM if expanded else BASE_DISTANCES_KM
    if not isinstance(stage, (int, np.integer)) or not 1 <= stage <= len(table):
        raise UnknownStage(f"stage {stage!r} not in 1..{len(table)}")
    return table[stage - 1]


def depletion_penalty(stage: int) -> float:
    return {1: 500.0, 2: 1000.0, 3: 1500.0, 4: 2000.0, 5: 3000.0}.get(stage, 2000.0)


# -- reward terms -----------------------------------------------------------

def reward_base(d_prev: float, d_now: float, literal: bool = False) -> float:
    """Step penalty, progress/backtracking and the distance/proximity term.

    By default the last term is ``-0.1*D + 10*max(0, 5 - D)`` on the current
    distance D. ``literal=True`` evaluates it on the change in distance.
    """
    dd = d_prev - d_now
    x = dd if literal else d_now
    return -1.0 + 5.0 * max(dd, 0.0) + 2.0 * min(dd, 0.0) - 0.1 * x + 10.0 * max(0.0, 5.0 - x)


def reward_battery(soc: float, is_charge: bool, at_charger: bool, dist_to_charger_km: float) -> float:
    r = 0.0
    if soc < 15 and not is_charge:
        r -= 100.0
    if 15 <= soc < 25 and not is_charge:
        r -= 50.0
    if soc < 40 and is_charge and at_charger:
        r += 30.0
    if dist_to_charger_km < 3 and soc < 50:
        r += 25.0 if soc < 25 else 10.0
    return r


def reward_charging(is_charge: bool, at_charger: bool, q: int, session_start_soc: float) -> float:
    """Charge-action reward keyed on ``q``, the charging steps remaining before the action."""
    if not is_charge:
        return 0.0
    if not at_charger:
        return -500.0
    if q == 0:
        return 20.0
    if q >= 2:
        return 10.0
    if session_start_soc < 20:
        return 300.0
    if session_start_soc < 40:
        return 200.0
    return 150.0


def reward_terminal(d_now: float, soc: float, t: int, budget: int, stage: int) -> float:
    r = 0.0
    if d_now < 5:
        r += 1000.0 + 2.0 * (budget - t)
    if soc <= 0:
        r -= depletion_penalty(stage)
    if t >= budget:
        r -= 200.0
    return r


@dataclass(frozen=True)
class RewardBreakdown:
    base: float
    bat: float
    chg: float
    term: float

    @property
    def total(self) -> float:
        return self.base + self.bat + self.chg + self.term


# -- configuration and state ------------------------------------------------

@dataclass(frozen=True)
class Curriculum:
    """Ordered target route lengths; stage ``s`` (1-based) uses ``distances_km[s-1]``."""

    distances_km: tuple[float, ...] = BASE_DISTANCES_KM
    tolerance: float = 0.2

    @classmethod
    def standard(cls, expanded: bool = True) -> "Curriculum":
        return cls(EXPANDED_DISTANCES_KM if expanded else BASE_DISTANCES_KM)

    def distance(self, stage: int) -> float:
        if not 1 <= stage <= len(self.distances_km):
            raise UnknownStage(f"stage {stage} not in 1..{len(self.distances_km)}")
        return self.distances_km[stage - 1]

    def __len__(self):
        return len(self.distances_km)


@dataclass(frozen=True)
class EnvConfig:
    success_radius_km: float = 5.0
    low_soc: float = 25.0
    critical_soc: float = 15.0
    charge_cap_pct: float = 80.0
    episode_budget: int | None = None  # None: 2 + ceil(4 * D0 / mean hop)
    charge_step_minutes: float = 10.0
    stage: int = 1
    initial_soc: float = 80.0
    strict: bool = True
    literal_distance_term: bool = False
    max_reset_tries: int = 200

    def __post_init__(self):
        if not 0 < self.critical_soc < self.low_soc < self.charge_cap_pct <= 100:
            raise InvalidArgument("need 0 < critical_soc < low_soc < charge_cap_pct <= 100")
        if self.episode_budget is not None and self.episode_budget < 1:
            raise InvalidArgument("episode_budget must be >= 1")
        if not self.charge_step_minutes > 0:
            raise InvalidArgument("charge_step_minutes must be > 0")
        if not 0 <= self.initial_soc <= 100:
            raise InvalidArgument("initial_soc outside [0, 100]")


@dataclass(frozen=True)
class EnvState:
    current: int
    goal: int
    soc: float
    step: int
    dist_to_goal_km: float
    charging_steps_remaining: int
    session_start_soc: float
    done_reason: str | None
    start: int
    initial_dist_km: float
    budget: int
    stage: int
    last_progress_km: float = 0.0
    drive_time_h: float = 0.0
    charge_time_min: float = 0.0
    energy_kwh: float = 0.0
    stops: int = 0
    invalid_charges: int = 0
    min_soc: float = 100.0

    @property
    def done(self) -> bool:
        return self.done_reason is not None

    def to_dict(self) -> dict:
        return asdict(self)


class ChargeEnv:
    """Single-threaded environment instance; the graph is shared read-only."""

    def __init__(
        self,
        g: RoadGraph,
        params: VehicleParams,
        cfg: EnvConfig = EnvConfig(),
        curriculum: Curriculum = Curriculum(),
        *,
        curve: ChargeCurve | None = None,
        teacher_cfg: TeacherConfig | None = None,
        record: bool = False,
    ):
        self.g, self.params, self.cfg, self.curriculum = g, params, cfg, curriculum
        self.curve = curve or default_curve()
        self.teacher_cfg = teacher_cfg or TeacherConfig(charge_cap_pct=cfg.charge_cap_pct)
        self.state: EnvState | None = None
        self.record = record
        self.trace: list[dict] = []
        self._plan_cache: dict = {}
        self._costs = [[segment_cost(e, params) for e in g.adjacency[v]] for v in range(len(g))]
        self._dist = g.distance_matrix
        self._q_max = max(1, math.ceil(charge_time_min(self.curve, 0.0, cfg.charge_cap_pct) / cfg.charge_step_minutes))
        lat0, lon0, lat1, lon1 = g.bbox
        self._bbox = (lat0, lon0, max(lat1 - lat0, 0.0), max(lon1 - lon0, 0.0))

    # -- helpers -------------------------------------------------------------

    def cached_plan(self, start: int, goal: int, soc: float):
        key = (start, goal, int(math.floor(soc / self.teacher_cfg.soc_bucket_pct + 1e-9)))
        p = self._plan_cache.get(key)
        if p is None:
            p = teacher_plan(self.g, self.teacher_cfg, self.params, start, goal, soc, self.curve)
            self._plan_cache[key] = p
        return p

    def set_stage(self, stage: int) -> None:
        self.curriculum.distance(stage)
        self.cfg = replace(self.cfg, stage=stage)

    def action_mask(self, state: EnvState | None = None) -> np.ndarray:
        """Valid actions: existing move slots plus the charge action (never masked)."""
        s = state or self.state
        m = np.zeros(N_ACTIONS, dtype=bool)
        m[: len(self.g.adjacency[s.current][:N_MOVE_SLOTS])] = True
        m[CHARGE] = True
        return m

    # -- reset -----------------------------------------------------------------

    def _sample_goal(self, rng, start, distance, soc0):
        lo, hi = (1 - self.curriculum.tolerance) * distance, (1 + self.curriculum.tolerance) * distance
        cands = np.flatnonzero((self._dist[start] >= lo) & (self._dist[start] <= hi))
        for j in rng.permutation(cands):
            if self.cached_plan(start, int(j), soc0).feasible:
                return int(j)
        return None

    def reset(self, seed=None, *, start=None, goal=None, soc=None):
        """Start an episode. Start node and goal are drawn from ``seed`` unless given.

        The goal is a node at the stage distance (within the curriculum
        tolerance) that the teacher can reach SoC-feasibly from the start.
        """
        rng = np.random.default_rng(seed)
        soc0 = self.cfg.initial_soc if soc is None else float(soc)
        stage = self.cfg.stage
        distance = self.curriculum.distance(stage)
        if goal is None:
            lo = (1 - self.curriculum.tolerance) * distance
            hi = (1 + self.curriculum.tolerance) * distance
            if not np.any((self._dist >= lo) & (self._dist <= hi)):
                raise NoGoalAtDistance(f"no node pair within {lo:.1f}-{hi:.1f} km for stage {stage}")
            for _ in range(self.cfg.max_reset_tries):
                s = int(rng.integers(len(self.g))) if start is None else start
                goal = self._sample_goal(rng, s, distance, soc0)
                if goal is not None:
                    start = s
                    break
                if start is not None:
                    break
            if goal is None:
                raise NoGoalAtDistance(f"no teacher-reachable goal at ~{distance} km for stage {stage}")
        elif start is None:
            start = int(rng.integers(len(self.g)))
        self.g.check(start)
        self.g.check(goal)
        d0 = float(self._dist[start, goal])
        hop = self.g.mean_edge_km or 1.0
        budget = self.cfg.episode_budget or 2 + math.ceil(4.0 * d0 / hop)
        self.state = EnvState(
            current=start, goal=goal, soc=soc0, step=0, dist_to_goal_km=d0,
            charging_steps_remaining=0, session_start_soc=soc0, done_reason=None,
            start=start, initial_dist_km=d0, budget=budget, stage=stage, min_soc=soc0,
        )
        if d0 < self.cfg.success_radius_km:
            self.state = replace(self.state, done_reason=SUCCESS)
        self.trace = []
        return self.state, self.observe(self.state)

    # -- step ------------------------------------------------------------------

    def step(self, action: int):
        s = self.state
        if s is None or s.done:
            raise EpisodeDone("episode finished; call reset()")
        a = int(action)
        if not 0 <= a < N_ACTIONS:
            raise InvalidActionSlot(f"action {a} outside 0..{N_ACTIONS - 1}")
        g, cfg = self.g, self.cfg
        slots = move_slots(g, s.current)
        is_charge = a == CHARGE
        if not is_charge and a >= len(slots):
            if cfg.strict or not slots:
                raise InvalidActionSlot(f"slot {a} but node {s.current} has {len(slots)} neighbours")
            a = len(slots) - 1

        at_charger = g.is_charger(s.current)
        b, q = s.soc, s.charging_steps_remaining
        bat = reward_battery(b, is_charge, at_charger, g.nearest_charger_km(s.current))
        chg = reward_charging(is_charge, at_charger, q, s.session_start_soc)

        cur, soc, b_start = s.current, b, s.session_start_soc
        drive_h, charge_min, energy = s.drive_time_h, s.charge_time_min, s.energy_kwh
        stops, invalid = s.stops, s.invalid_charges
        if is_charge:
            if not at_charger:
                invalid += 1
            else:
                if q == 0:
                    b_start = b
                    need = charge_time_min(self.curve, b, cfg.charge_cap_pct) if b < cfg.charge_cap_pct else 0.0
                    q = math.ceil(need / cfg.charge_step_minutes - 1e-9) if need > 0 else 0
                    stops += q > 0
                if q > 0:
                    soc = min(cfg.charge_cap_pct, soc_after_charging(self.curve, b, cfg.charge_step_minutes, cfg.charge_cap_pct))
                    charge_min += charge_time_min(self.curve, b, soc) if soc > b else 0.0
                    q -= 1
        else:
            q = 0
            cost = self._costs[s.current][a]
            if b - cost.soc_drop_pct <= 0:
                soc = 0.0  # stranded before reaching the next node
            else:
                cur = slots[a]
                soc = b - cost.soc_drop_pct
                drive_h += cost.time_h
                energy += cost.energy_kwh

        t = s.step + 1
        d_now = float(self._dist[cur, s.goal])
        base = reward_base(s.dist_to_goal_km, d_now, cfg.literal_distance_term)
        term = reward_terminal(d_now, soc, t, s.budget, s.stage)
        if soc <= 0:
            reason = DEPLETED
        elif d_now < cfg.success_radius_km:
            reason = SUCCESS
        elif t >= s.budget:
            reason = TIMEOUT
        else:
            reason = None
        self.state = replace(
            s, current=cur, soc=soc, step=t, dist_to_goal_km=d_now, charging_steps_remaining=q,
            session_start_soc=b_start, done_reason=reason, last_progress_km=s.dist_to_goal_km - d_now,
            drive_time_h=drive_h, charge_time_min=charge_min, energy_kwh=energy, stops=stops,
            invalid_charges=invalid, min_soc=min(s.min_soc, soc),
        )
        rb = RewardBreakdown(base, bat, chg, term)
        if self.record:
            self.trace.append({"state": s.to_dict(), "action": a, "reward": asdict(rb) | {"total": rb.total},
                               "done_reason": reason})
        return self.state, self.observe(self.state), rb, reason is not None

    # -- observation -----------------------------------------------------------

    def observe(self, s: EnvState) -> np.ndarray:
        """Fixed 26-slot layout: 13 core features followed by 13 context features.

        core:    lat/lon of current and goal (bbox-normalised), D/D0, soc/100,
                 at_charger, distance progress (D0-D)/D0, last progress / mean hop
                 in [-1, 1], soc<15, soc<25, D<5 km, charger within 3 km
        context: nearest-charger distance / D0, q / q_max, eight neighbour-to-goal
                 distances / (2*D0) (1.0 for empty slots), stage/12,
                 neighbour count / 8, t / budget
        """
        g, cfg = self.g, self.cfg
        lat0, lon0, dlat, dlon = self._bbox
        d0 = max(s.initial_dist_km, 1e-9)

        def nlat(v):
            return (g.pos(v).lat - lat0) / dlat if dlat > 0 else 0.5

        def nlon(v):
            return (g.pos(v).lon - lon0) / dlon if dlon > 0 else 0.5

        d = s.dist_to_goal_km
        dchg = g.nearest_charger_km(s.current)
        hop = g.mean_edge_km or 1.0
        x = np.empty(OBS_DIM)
        x[0], x[1], x[2], x[3] = nlat(s.current), nlon(s.current), nlat(s.goal), nlon(s.goal)
        x[4] = min(1.0, d / d0)
        x[5] = s.soc / 100.0
        x[6] = float(g.is_charger(s.current))
        x[7] = min(1.0, max(0.0, (s.initial_dist_km - d) / d0))
        x[8] = max(-1.0, min(1.0, s.last_progress_km / hop))
        x[9] = float(s.soc < cfg.critical_soc)
        x[10] = float(s.soc < cfg.low_soc)
        x[11] = float(d < cfg.success_radius_km)
        x[12] = float(dchg < 3.0)
        x[13] = min(1.0, dchg / d0)
        x[14] = min(1.0, s.charging_steps_remaining / self._q_max)
        nb = move_slots(g, s.current)
        x[15:23] = 1.0
        for k, u in enumerate(nb):
            x[15 + k] = min(1.0, self._dist[u, s.goal] / (2.0 * d0))
        x[23] = min(1.0, s.stage / 12.0)
        x[24] = len(nb) / N_MOVE_SLOTS
        x[25] = min(1.0, s.step / s.budget)
        return x


def write_trace(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
