"""
Curriculum PPO on the corridor
==============================

Train a policy on trips of growing length, with the search teacher
steering early exploration, then drive the longest trips greedily.
Takes well under a minute on one core.
"""

from dataclasses import replace
from pathlib import Path

from evroute.cli import load_config, training_setup
from evroute.energy import default_params
from evroute.env import ChargeEnv
from evroute.ppo import evaluate, train
from evroute.road_graph import load_graph
from evroute.routeplan import plan_with_policy

ROOT = Path(__file__).resolve().parent.parent
cfg = load_config(ROOT / "configs" / "corridor20.toml")
ppo_cfg, env_cfg, teacher_cfg, curriculum = training_setup(cfg, seed=0)
g = load_graph(ROOT / cfg["graph"])
params = default_params()
print("stages (km):", curriculum.distances_km)

result = train(g, params, curriculum, ppo_cfg, env_cfg, teacher_cfg)
for m in result.stage_metrics:
    print(f"stage {m['stage']}: {m['episodes']} episodes, recent success {m['success_rate']:.2f}, "
          f"teacher agreement {m['compliance_rate']:.2f}")

# greedy evaluation on the hardest stage, where every trip must charge once
env = ChargeEnv(g, params, replace(env_cfg, stage=len(curriculum)), curriculum)
ev = evaluate(result.policy, env, 100)
print(f"greedy: success {ev.success_rate:.2f}, depleted {ev.depletion_rate:.2f}, "
      f"mean stops {ev.mean_stops:.2f}, lowest SoC seen {ev.min_soc:.1f}%")

# the trained policy as a planner; greedy routes can wobble around the charger
route = plan_with_policy(g, params, result.policy, env_cfg, curriculum, 0, 15, 80.0)
print("policy route nodes:", route.meta["nodes"])
print(f"{route.totals.distance_km:.0f} km, {route.totals.stops} stop(s), "
      f"{60 * route.totals.charging_time_h:.1f} min charging")
