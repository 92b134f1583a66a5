"""
Planning with the search teacher
================================

A 570 km corridor whose only charger sits halfway forces one stop. The
planner searches over (node, SoC) and decides where and whether to charge.
"""

import json
from pathlib import Path

from evroute.energy import default_params
from evroute.road_graph import load_graph
from evroute.routeplan import plan_with_teacher, replay_feasible, to_geojson
from evroute.teacher import TeacherConfig, plan

HERE = Path(__file__).resolve().parent
g = load_graph(HERE.parent / "configs" / "corridor20.json")
params = default_params()
print(f"{len(g)} nodes, {g.n_edges} directed edges, chargers at {g.chargers}")

# raw search result: node path, where it charges, total cost in minutes
p = plan(g, TeacherConfig(), params, 0, 19, 80.0)
print("path:", p.path)
print("charges before leaving path index:", p.charge_idx, "cost (min):", round(p.cost, 1))

# a capped search budget returns the best prefix found so far
short = plan(g, TeacherConfig(n_exp=5), params, 0, 19, 80.0)
print("with 5 expansions:", short.feasible, short.path)

# grouped into segments that end at each charging stop
route = plan_with_teacher(g, params, 0, 19, 80.0)
for i, s in enumerate(route.segments):
    print(f"segment {i}: {s.distance_km:.0f} km, arrive at {s.end_soc_pct:.1f}%, charge {60 * s.charging_time_h:.1f} min")
print(json.dumps(route.totals.to_dict(), indent=2))
print("replays without running flat:", replay_feasible(route, params, 80.0))

# GeoJSON for a map viewer
doc = to_geojson(route)
print([f["geometry"]["type"] for f in doc["features"]])

# starting lower makes the trip impossible; the single charger cannot be reached
print("from 30%:", plan(g, TeacherConfig(), params, 0, 19, 30.0).feasible)
