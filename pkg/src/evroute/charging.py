"""Charging-time surrogate: a no-intercept polynomial in SoC (percent) giving minutes.

``t(b) = sum_k w_k * b**k`` for ``k = 1..degree`` is the cumulative time to
charge from empty to ``b``. Time between two SoC levels is the difference.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientData, InvalidArgument, NonMonotoneFit, ParseError

GRID_STEP_PCT = 0.1
BISECT_TOL_PCT = 1e-6

# Coefficients exactly as published for the percent/minute basis. They imply
# about 26 hours for 0-100 %, so only polynomial-evaluation tests use them.
PUBLISHED_W = (5.339e-1, -2.337e-2, 6.757e-4, 7.620e-6, 3.000e-8)


def _cumulative(w: np.ndarray, b):
    # Horner on b * (w1 + b * (w2 + ...)), no intercept
    acc = np.zeros_like(np.asarray(b, dtype=float)) if np.ndim(b) else 0.0
    for c in w[::-1]:
        acc = acc * b + c
    return acc * b


@dataclass(frozen=True)
class ChargeCurve:
    w: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if not w or not np.all(np.isfinite(w)):
            raise InvalidArgument("curve needs at least one finite coefficient")
        object.__setattr__(self, "w", w)
        grid = np.linspace(0.0, 100.0, int(round(100.0 / GRID_STEP_PCT)) + 1)
        t = _cumulative(np.asarray(w), grid)
        if not np.all(np.diff(t) > 0):
            bad = grid[1:][np.diff(t) <= 0][0]
            raise NonMonotoneFit(f"charge time not strictly increasing near {bad:.1f}% SoC")

    @property
    def degree(self) -> int:
        return len(self.w)

    def cumulative_min(self, b):
        """Minutes to charge from 0 % to ``b``."""
        return _cumulative(np.asarray(self.w), b)

    def to_dict(self) -> dict:
        return {"w": list(self.w)}

    @classmethod
    def from_dict(cls, data) -> "ChargeCurve":
        if not isinstance(data, dict) or not isinstance(data.get("w"), list):
            raise ParseError("curve JSON must be an object with list field 'w'", field="w")
        return cls(tuple(data["w"]))

    @classmethod
    def published(cls) -> "ChargeCurve":
        return cls(PUBLISHED_W)


def save_curve(curve: ChargeCurve, path) -> None:
    Path(path).write_text(json.dumps(curve.to_dict()) + "\n", encoding="utf-8")


def load_curve(path) -> ChargeCurve:
    try:
        return ChargeCurve.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None


def _check_soc(b, name):
    if not 0.0 <= b <= 100.0:
        raise InvalidArgument(f"{name}={b} outside [0, 100]")


def charge_time_min(curve: ChargeCurve, b_i: float, b_f: float) -> float:
    _check_soc(b_i, "b_i")
    _check_soc(b_f, "b_f")
    if b_i > b_f:
        raise InvalidArgument(f"b_i={b_i} exceeds b_f={b_f}")
    if b_i == b_f:
        return 0.0
    return float(curve.cumulative_min(b_f) - curve.cumulative_min(b_i))


def soc_after_charging(curve: ChargeCurve, b_i: float, minutes: float, cap: float = 100.0) -> float:
    """SoC reached after charging ``minutes`` from ``b_i``, never above ``cap``."""
    _check_soc(b_i, "b_i")
    if minutes < 0:
        raise InvalidArgument("minutes must be >= 0")
    cap = min(cap, 100.0)
    if minutes == 0 or b_i >= cap:
        return b_i
    target = float(curve.cumulative_min(b_i)) + minutes
    if curve.cumulative_min(cap) <= target:
        return cap
    lo, hi = b_i, cap
    while hi - lo > BISECT_TOL_PCT:
        mid = 0.5 * (lo + hi)
        if curve.cumulative_min(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- fitting ----------------------------------------------------------------

@dataclass(frozen=True)
class ChargeSample:
    soc_pct: float
    minutes_from_empty: float


def _design(x: np.ndarray, degree: int) -> np.ndarray:
    return np.column_stack([x**k for k in range(1, degree + 1)])


def _ridge(X, y, lam):
    A = X.T @ X + lam * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ y), A


def loocv_mse(X: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Closed-form leave-one-out error of a ridge fit via the hat-matrix diagonal."""
    coef, A = _ridge(X, y, lam)
    h = np.einsum("ij,ji->i", X, np.linalg.solve(A, X.T))
    resid = (y - X @ coef) / (1.0 - h)
    return float(np.mean(resid**2))


def fit_charge_curve(
    samples: Sequence[ChargeSample],
    ridge_lambda: float = 0.0,
    degrees: Sequence[int] = (4, 5, 6),
    *,
    rtol: float = 1e-9,
) -> ChargeCurve:
    """No-intercept ridge fit, degree chosen by leave-one-out error.

    The fit runs on SoC scaled to [0, 1] (so the penalty is scale-free) and
    coefficients are mapped back to the percent basis. Among degrees whose
    LOOCV error is within ``rtol`` of the best, the lowest wins.
    """
    if len(samples) < 8:
        raise InsufficientData(f"need at least 8 samples, got {len(samples)}")
    pts = sorted((float(s.soc_pct), float(s.minutes_from_empty)) for s in samples)
    soc = np.array([p[0] for p in pts])
    t = np.array([p[1] for p in pts])
    if np.any(np.diff(soc) == 0):
        raise InsufficientData("SoC values must be distinct")
    if np.any(np.diff(t) < 0):
        raise InsufficientData("charge times must be nondecreasing in SoC")
    if np.any((soc < 0) | (soc > 100)) or np.any(t < 0):
        raise InsufficientData("samples outside valid SoC/time range")
    if ridge_lambda < 0:
        raise InvalidArgument("ridge_lambda must be >= 0")

    x = soc / 100.0
    scores = {}
    for d in sorted(degrees):
        if d < 1 or d >= len(soc):
            continue
        scores[d] = loocv_mse(_design(x, d), t, ridge_lambda)
    if not scores:
        raise InsufficientData("no candidate degree fits the sample count")
    best = min(scores.values())
    slack = rtol * (best + float(np.mean(t**2)))
    degree = min(d for d, s in scores.items() if s <= best + slack)
    coef, _ = _ridge(_design(x, degree), t, ridge_lambda)
    w = tuple(float(c) / 100.0**k for k, c in enumerate(coef, start=1))
    return ChargeCurve(w)


def read_samples_csv(text: str) -> list[ChargeSample]:
    out = []
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or {"soc_pct", "minutes"} - set(reader.fieldnames):
        raise ParseError("anchor CSV needs header 'soc_pct,minutes'", line=1)
    for row in reader:
        try:
            out.append(ChargeSample(float(row["soc_pct"]), float(row["minutes"])))
        except (TypeError, ValueError):
            raise ParseError("non-numeric value", line=reader.line_num) from None
    return out


def load_samples(path) -> list[ChargeSample]:
    return read_samples_csv(Path(path).read_text(encoding="utf-8"))


DEFAULT_RIDGE = 1e-6


@lru_cache(maxsize=1)
def default_curve() -> ChargeCurve:
    """Curve refit from the shipped anchor table (about 27 min for 10 -> 80 %)."""
    text = resources.files("evroute.data").joinpath("charge_anchors.csv").read_text()
    return fit_charge_curve(read_samples_csv(text), DEFAULT_RIDGE)
