"""
Energy use and charging time
============================

How much battery a highway leg costs, and how long it takes to put it back.
"""

import numpy as np

from evroute.charging import charge_time_min, default_curve, soc_after_charging
from evroute.energy import default_params, energy_per_km_kwh, segment_cost
from evroute.road_graph import Edge

# vehicle parameters fitted for a mid-size EV, 67.5 kWh pack
params = default_params()
print(params)

# one 100 km leg at a steady 100 km/h
cost = segment_cost(Edge(0, 1, 100.0, 100.0), params)
print(f"100 km at 100 km/h: {cost.energy_kwh:.2f} kWh, {cost.soc_drop_pct:.2f}% of the pack, {cost.time_h:.2f} h")

# intensity rises with speed once drag dominates
for kmh in (60, 80, 90, 100, 110, 130):
    print(f"  {kmh:4d} km/h -> {1000 * energy_per_km_kwh(kmh, params):6.1f} Wh/km")

# the charge curve is a polynomial in SoC giving minutes from empty
curve = default_curve()
print("curve coefficients:", np.round(curve.w, 8))
for lo, hi in ((10, 80), (20, 80), (80, 100)):
    print(f"  {lo:3d}% -> {hi:3d}%: {charge_time_min(curve, lo, hi):5.1f} min")

# the inverse: what 10 minutes on the plug buys from 15%
print(f"10 min from 15% reaches {soc_after_charging(curve, 15.0, 10.0):.1f}%")
