"""Route plans grouped into charge-delimited segments, with JSON and GeoJSON output.

A segment runs from the previous stop (or the origin) to the next charging
stop (or the goal); its charging time is spent at its end.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .charging import ChargeCurve, charge_time_min, default_curve
from .energy import VehicleParams, discharge, segment_cost
from .errors import Depleted, InvalidArgument, NoFeasiblePath, ParseError
from .road_graph import GeoPoint, RoadGraph
from .env import CHARGE, SUCCESS, ChargeEnv
from .teacher import TeacherConfig
from .teacher import plan as teacher_plan

TOTALS_TOL = 1e-6


@dataclass(frozen=True)
class Segment:
    start: GeoPoint
    distance_km: float
    driving_time_h: float
    energy_kwh: float
    end_soc_pct: float
    charging_time_h: float
    path: tuple[GeoPoint, ...] = ()
    soc_after_charge_pct: float | None = None

    def to_dict(self) -> dict:
        d = {
            "start": {"lat": self.start.lat, "lon": self.start.lon},
            "distance_km": self.distance_km,
            "driving_time_h": self.driving_time_h,
            "energy_kwh": self.energy_kwh,
            "end_soc_pct": self.end_soc_pct,
            "charging_time_h": self.charging_time_h,
            "path": [[p.lon, p.lat] for p in self.path],
        }
        if self.soc_after_charge_pct is not None:
            d["soc_after_charge_pct"] = self.soc_after_charge_pct
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        try:
            return cls(
                GeoPoint(float(d["start"]["lat"]), float(d["start"]["lon"])),
                float(d["distance_km"]), float(d["driving_time_h"]), float(d["energy_kwh"]),
                float(d["end_soc_pct"]), float(d["charging_time_h"]),
                tuple(GeoPoint(float(lat), float(lon)) for lon, lat in d.get("path", [])),
                None if d.get("soc_after_charge_pct") is None else float(d["soc_after_charge_pct"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad plan segment: {exc}", field="segments") from None


@dataclass(frozen=True)
class Totals:
    distance_km: float
    driving_time_h: float
    charging_time_h: float
    energy_kwh: float
    stops: int
    avg_dwell_min: float
    avg_hop_km: float
    energy_intensity_wh_per_km: float

    @classmethod
    def of(cls, segments) -> "Totals":
        dist = sum(s.distance_km for s in segments)
        drive = sum(s.driving_time_h for s in segments)
        charge = sum(s.charging_time_h for s in segments)
        energy = sum(s.energy_kwh for s in segments)
        stops = sum(1 for s in segments if s.charging_time_h > 0)
        return cls(
            distance_km=dist,
            driving_time_h=drive,
            charging_time_h=charge,
            energy_kwh=energy,
            stops=stops,
            avg_dwell_min=60.0 * charge / stops if stops else 0.0,
            avg_hop_km=dist / len(segments) if segments else 0.0,
            energy_intensity_wh_per_km=1000.0 * energy / dist if dist > 0 else 0.0,
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RoutePlan:
    segments: tuple[Segment, ...]
    totals: Totals
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_segments(cls, segments, meta=None) -> "RoutePlan":
        segments = tuple(segments)
        return cls(segments, Totals.of(segments), dict(meta or {}))

    @property
    def stop_points(self) -> list[GeoPoint]:
        return [s.path[-1] if s.path else s.start for s in self.segments if s.charging_time_h > 0]

    def check(self) -> None:
        """Raise if totals disagree with the segments or any SoC/charging value is out of range."""
        for s in self.segments:
            if not 0.0 <= s.end_soc_pct <= 100.0:
                raise InvalidArgument(f"end SoC {s.end_soc_pct} outside [0, 100]")
            if s.charging_time_h < 0:
                raise InvalidArgument("negative charging time")
        ref = Totals.of(self.segments)
        for k, v in ref.to_dict().items():
            if abs(getattr(self.totals, k) - v) > TOTALS_TOL * max(1.0, abs(v)):
                raise InvalidArgument(f"totals.{k} = {getattr(self.totals, k)} but segments give {v}")

    def to_dict(self) -> dict:
        return {"segments": [s.to_dict() for s in self.segments], "totals": self.totals.to_dict(), "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RoutePlan":
        if not isinstance(d, dict) or not isinstance(d.get("segments"), list):
            raise ParseError("plan JSON needs a 'segments' list", field="segments")
        segs = tuple(Segment.from_dict(s) for s in d["segments"])
        plan = cls.from_segments(segs, d.get("meta"))
        return plan


def load_plan(path) -> RoutePlan:
    try:
        return RoutePlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None


def build_plan(
    g: RoadGraph,
    params: VehicleParams,
    path,
    charges: dict[int, float],
    soc0: float,
    curve: ChargeCurve | None = None,
    meta: dict | None = None,
) -> RoutePlan:
    """Replay ``path`` in continuous SoC, charging at ``charges[i]`` (target SoC) before leaving ``path[i]``.

    Raises :class:`~evroute.errors.Depleted` if any leg cannot be driven.
    """
    curve = curve or default_curve()
    path = list(path)
    if not path:
        raise InvalidArgument("empty path")
    soc = float(soc0)
    segs: list[Segment] = []
    start = g.pos(path[0])
    coords = [start]
    dist = drive = energy = 0.0
    for i, v in enumerate(path):
        target = charges.get(i)
        if target is not None and target > soc and g.is_charger(v):
            dwell_min = charge_time_min(curve, soc, target)
            segs.append(Segment(start, dist, drive, energy, soc, dwell_min / 60.0, tuple(coords), target))
            soc = target
            start, coords = g.pos(v), [g.pos(v)]
            dist = drive = energy = 0.0
        if i + 1 < len(path):
            e = g.edge(v, path[i + 1])
            cost = segment_cost(e, params)
            soc = discharge(soc, cost)
            dist += e.length_km
            drive += cost.time_h
            energy += cost.energy_kwh
            coords.append(g.pos(path[i + 1]))
    if len(coords) >= 2 or not segs:  # skip an empty tail after a final charging stop
        segs.append(Segment(start, dist, drive, energy, soc, 0.0, tuple(coords)))
    return RoutePlan.from_segments(segs, meta)


def replay_feasible(plan: RoutePlan, params: VehicleParams, soc0: float) -> bool:
    """Re-walk the plan's energy column through discharge/charge; False if SoC ever goes negative."""
    soc = soc0
    try:
        for s in plan.segments:
            soc = discharge(soc, s.energy_kwh, params)
            if abs(soc - s.end_soc_pct) > 1e-6:
                return False
            if s.charging_time_h > 0:
                soc = s.soc_after_charge_pct if s.soc_after_charge_pct is not None else soc
    except Depleted:
        return False
    return True


# -- GeoJSON ---------------------------------------------------------------------

def _pt(p: GeoPoint):
    return [p.lon, p.lat]


def to_geojson(plan: RoutePlan) -> dict:
    """FeatureCollection: a LineString per driving segment and a Point per charging stop.

    A plan without any driving yields a single Point at its origin.
    """
    feats = []
    for i, s in enumerate(plan.segments):
        if len(s.path) >= 2:
            feats.append({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [_pt(p) for p in s.path]},
                "properties": {"kind": "drive", "segment": i, "distance_km": s.distance_km,
                               "driving_time_h": s.driving_time_h, "energy_kwh": s.energy_kwh,
                               "end_soc_pct": s.end_soc_pct},
            })
        if s.charging_time_h > 0:
            at = s.path[-1] if s.path else s.start
            feats.append({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": _pt(at)},
                "properties": {"kind": "charge", "segment": i, "dwell_min": 60.0 * s.charging_time_h,
                               "arrival_soc_pct": s.end_soc_pct, "end_soc_pct": s.soc_after_charge_pct},
            })
    if not feats:
        origin = plan.segments[0].start if plan.segments else None
        if origin is None:
            raise InvalidArgument("plan has no segments")
        feats.append({"type": "Feature", "geometry": {"type": "Point", "coordinates": _pt(origin)},
                      "properties": {"kind": "origin"}})
    return {"type": "FeatureCollection", "features": feats}


def validate_geojson(doc: dict) -> None:
    """Structural checks for the subset of GeoJSON emitted here."""
    if doc.get("type") != "FeatureCollection" or not isinstance(doc.get("features"), list):
        raise InvalidArgument("not a FeatureCollection")
    for f in doc["features"]:
        if f.get("type") != "Feature" or not isinstance(f.get("properties"), dict):
            raise InvalidArgument("bad Feature")
        geom = f.get("geometry") or {}
        kind, coords = geom.get("type"), geom.get("coordinates")
        if kind == "Point":
            pts = [coords]
        elif kind == "LineString":
            if not isinstance(coords, list) or len(coords) < 2:
                raise InvalidArgument("LineString needs >= 2 positions")
            pts = coords
        else:
            raise InvalidArgument(f"unsupported geometry {kind!r}")
        for p in pts:
            if (not isinstance(p, list) or len(p) != 2 or not all(isinstance(x, (int, float)) for x in p)
                    or not -180 <= p[0] <= 180 or not -90 <= p[1] <= 90 or not all(math.isfinite(x) for x in p)):
                raise InvalidArgument(f"bad position {p!r}")


# -- planners ----------------------------------------------------------------------

def plan_with_teacher(g, params, start, goal, soc0, cfg=None, curve=None) -> RoutePlan:
    """Unbudgeted-by-default A* plan, replayed in continuous SoC."""
    cfg = cfg or TeacherConfig()
    p = teacher_plan(g, cfg, params, start, goal, soc0, curve)
    if not p.feasible:
        raise NoFeasiblePath(f"no SoC-feasible route from node {start} to node {goal}")
    charges = {i: cfg.charge_cap_pct for i in p.charge_idx}
    meta = {"mode": "teacher", "start_node": start, "goal_node": goal, "soc0": soc0, "cost": p.cost,
            "nodes": list(p.path)}
    return build_plan(g, params, p.path, charges, soc0, curve, meta)


def plan_with_policy(g, params, net, env_cfg, curriculum, start, goal, soc0, curve=None) -> RoutePlan:
    """Greedy rollout of a trained policy; the stage is the one whose distance is closest to the trip."""
    d0 = g.distance_km(start, goal)
    stage = min(range(1, len(curriculum) + 1), key=lambda s: abs(curriculum.distance(s) - d0))
    env = ChargeEnv(g, params, replace(env_cfg, stage=stage, strict=False), curriculum, curve=curve)
    state, obs = env.reset(0, start=start, goal=goal, soc=soc0)
    path, charges = [start], {}
    while not state.done:
        a = net.act(obs, env.action_mask(), deterministic=True)
        before = state
        state, obs, _, _ = env.step(a)
        if state.current != before.current:
            path.append(state.current)
        elif a == CHARGE and state.soc > before.soc:
            charges[len(path) - 1] = state.soc
    if state.done_reason != SUCCESS:
        raise NoFeasiblePath(f"policy rollout ended with {state.done_reason} after {state.step} steps")
    meta = {"mode": "policy", "start_node": start, "goal_node": goal, "soc0": soc0, "nodes": path,
            "end_node": state.current}
    return build_plan(g, params, path, charges, soc0, curve, meta)
