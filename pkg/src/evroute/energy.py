"""Longitudinal power model, cruise segment energy and SoC bookkeeping.

Units: speeds in m/s and powers in W inside the physics functions; segment
costs take km and km/h from the road graph and return kWh and hours.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import Depleted, InvalidArgument, ParseError


@dataclass(frozen=True)
class VehicleParams:
    c_d: float = 0.2349
    c_rr: float = 0.009462
    mass_kg: float = 1977.0
    p_aux_w: float = 1046.0
    eta: float = 0.8302
    mu: float = 0.7413
    frontal_area_m2: float = 2.22
    air_density: float = 1.225
    g: float = 9.81
    battery_kwh: float = 67.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
                raise InvalidArgument(f"{f.name} must be a finite positive number, got {v!r}")
        if self.eta > 1 or self.mu > 1:
            raise InvalidArgument("eta and mu must not exceed 1")

    @property
    def drag_coef(self) -> float:
        """0.5 * rho * A * C_d, the v**3 coefficient of wheel power."""
        return 0.5 * self.air_density * self.frontal_area_m2 * self.c_d

    def with_(self, **kw) -> "VehicleParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "VehicleParams":
        if not isinstance(data, dict):
            raise ParseError("vehicle params must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ParseError(f"unknown vehicle parameter(s): {sorted(extra)}", field=sorted(extra)[0])
        for k, v in data.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ParseError(f"expected number, got {v!r}", field=k)
        return cls(**{k: float(v) for k, v in data.items()})


def default_params() -> VehicleParams:
    """Shipped defaults: estimated Model 3 LR values plus A, rho, g, B."""
    text = resources.files("evroute.data").joinpath("params_default.json").read_text()
    return VehicleParams.from_dict(json.loads(text))


def load_params(path) -> VehicleParams:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    if isinstance(data, dict) and "params" in data and isinstance(data["params"], dict):
        data = data["params"]  # estimator output wraps the parameter block
    return VehicleParams.from_dict(data)


def save_params(p: VehicleParams, path) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SegmentCost:
    energy_kwh: float
    time_h: float
    soc_drop_pct: float


def mechanical_power_w(v, a, p: VehicleParams):
    """Wheel power on a flat road: aero + rolling + inertial, in W.

    Accepts scalars or numpy arrays.
    """
    v = np.asarray(v, dtype=float) if not np.isscalar(v) else float(v)
    if np.any(np.asarray(v) < 0):
        raise InvalidArgument("speed must be >= 0")
    return p.drag_coef * v**3 + p.c_rr * p.mass_kg * p.g * v + p.mass_kg * a * v


def battery_power_w(v, a, p: VehicleParams):
    """Battery-side power: P_m / eta, less mu * P_m while braking, plus auxiliary load."""
    pm = mechanical_power_w(v, a, p)
    braking = np.asarray(a) < 0
    out = pm / p.eta - p.mu * pm * braking + p.p_aux_w
    return float(out) if np.ndim(out) == 0 else out


def cruise_power_w(v_mps: float, p: VehicleParams) -> float:
    """Battery power at constant speed (no inertial term)."""
    return (p.drag_coef * v_mps**3 + p.c_rr * p.mass_kg * p.g * v_mps) / p.eta + p.p_aux_w


def energy_per_km_kwh(speed_kmh: float, p: VehicleParams) -> float:
    v = speed_kmh / 3.6
    return cruise_power_w(v, p) / speed_kmh / 1000.0


def min_energy_per_km_kwh(v_max_kmh: float, p: VehicleParams) -> float:
    """Smallest cruise energy per km over speeds in (0, v_max]."""
    # d/dv of per-metre energy vanishes at v**3 = P_aux * eta / (rho A C_d)
    v_star = (p.p_aux_w * p.eta / (2.0 * p.drag_coef)) ** (1.0 / 3.0) * 3.6
    return energy_per_km_kwh(min(v_star, v_max_kmh), p)


def cruise_energy_kwh(distance_km: float, speed_kmh: float, p: VehicleParams) -> float:
    if distance_km == 0:
        return 0.0
    return cruise_power_w(speed_kmh / 3.6, p) * (distance_km / speed_kmh) / 1000.0


def segment_cost(edge, p: VehicleParams) -> SegmentCost:
    d, v = edge.length_km, edge.speed_limit_kmh
    if not d > 0 or not v > 0:
        raise InvalidArgument("segment length and speed must be > 0")
    dt_h = d / v
    e_kwh = cruise_power_w(v / 3.6, p) * dt_h / 1000.0
    return SegmentCost(e_kwh, dt_h, soc_drop_pct(e_kwh, p))


def soc_drop_pct(energy_kwh: float, p: VehicleParams) -> float:
    return 100.0 * energy_kwh / p.battery_kwh


def discharge(soc_pct: float, cost: SegmentCost | float, p: VehicleParams | None = None) -> float:
    """SoC after traversing a segment; raises :class:`Depleted` below zero.

    ``cost`` is either a :class:`SegmentCost` or a raw energy in kWh
    (then ``p`` supplies the battery capacity).
    """
    if isinstance(cost, SegmentCost):
        drop = cost.soc_drop_pct
    else:
        if p is None:
            raise InvalidArgument("raw energy needs vehicle params for capacity")
        drop = soc_drop_pct(float(cost), p)
    out = soc_pct - drop
    if out < 0:
        raise Depleted(-out)
    return out
