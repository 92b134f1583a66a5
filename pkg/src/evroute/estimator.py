"""Vehicle parameter fitting from speed and battery-power logs.

The forward model is :func:`evroute.energy.battery_power_w`. Parameters are
mapped from unconstrained values into boxes by a sigmoid and fitted with a
trust-region least-squares solver on the hybrid loss (data misfit, residual
buffer, smoothness of the efficiency tracks, prior on the raw values).

The data term is the mean squared power misfit in W**2; the weights on the
other terms are small enough that the prior only breaks the degeneracy
described below.

Identifiability: scaling ``eta, c_d, mass`` by k and ``mu`` by 1/k leaves
battery power unchanged, so from power alone only ``c_d/eta``,
``mass/eta``, ``c_rr``, ``mu*eta`` and ``p_aux`` are pinned down. The prior
on the raw values selects one point on that ridge.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .energy import VehicleParams, battery_power_w, default_params
from .errors import (
    InsufficientData,
    InsufficientExcitation,
    InvalidArgument,
    MissingPowerChannel,
    NonFiniteLoss,
    ParseError,
)

PARAM_NAMES = ("c_d", "c_rr", "mass_kg", "p_aux_w", "eta", "mu")
DEFAULT_BOUNDS = {
    "c_d": (0.15, 0.4),
    "c_rr": (0.005, 0.02),
    "mass_kg": (1200.0, 2600.0),
    "p_aux_w": (0.0, 5000.0),
    "eta": (0.5, 1.0),
    "mu": (0.5, 1.0),
}
MIN_SAMPLES = 256
COND_LIMIT = 1e4  # ceiling for identifiable_condition on a well-excited log


# -- drive logs ----------------------------------------------------------------

def central_accel(v, dt: float) -> np.ndarray:
    """Acceleration by central differences, one-sided at the ends."""
    return np.gradient(np.asarray(v, dtype=float), dt, edge_order=1)


@dataclass(frozen=True)
class DriveLog:
    t_s: np.ndarray
    v_mps: np.ndarray
    a_mps2: np.ndarray | None = None
    p_bat_w: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t_s, dtype=float)
        v = np.asarray(self.v_mps, dtype=float)
        if t.ndim != 1 or len(t) < 2 or v.shape != t.shape:
            raise InvalidArgument("timestamps and speeds must be equal-length 1-D arrays with >= 2 samples")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(v)):
            raise InvalidArgument("non-finite timestamps or speeds")
        dt = np.diff(t)
        if np.any(dt <= 0):
            raise InvalidArgument("timestamps must be strictly increasing")
        if np.max(np.abs(dt - dt[0])) > 1e-6:
            raise InvalidArgument("timestamps must be uniformly spaced")
        if np.any(v < 0):
            raise InvalidArgument("speeds must be >= 0")
        a = central_accel(v, dt[0]) if self.a_mps2 is None else np.asarray(self.a_mps2, dtype=float)
        if a.shape != t.shape or not np.all(np.isfinite(a)):
            raise InvalidArgument("acceleration must match timestamps and be finite")
        p = None
        if self.p_bat_w is not None:
            p = np.asarray(self.p_bat_w, dtype=float)
            if p.shape != t.shape or not np.all(np.isfinite(p)):
                raise InvalidArgument("battery power must match timestamps and be finite")
        object.__setattr__(self, "t_s", t)
        object.__setattr__(self, "v_mps", v)
        object.__setattr__(self, "a_mps2", a)
        object.__setattr__(self, "p_bat_w", p)

    @classmethod
    def from_speed(cls, v, dt: float = 1.0, power=None) -> "DriveLog":
        v = np.asarray(v, dtype=float)
        return cls(np.arange(len(v)) * dt, v, None, power)

    @property
    def dt(self) -> float:
        return float(self.t_s[1] - self.t_s[0])

    def __len__(self):
        return len(self.t_s)


def read_log_csv(text: str) -> DriveLog:
    """Parse ``t_s,v_mps[,a_mps2][,p_bat_w]``; errors carry the 1-based file line."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty drive log", line=1) from None
    if header[:2] != ["t_s", "v_mps"] or set(header[2:]) - {"a_mps2", "p_bat_w"} or len(set(header)) != len(header):
        raise ParseError("header must be t_s,v_mps[,a_mps2][,p_bat_w]", line=1)
    cols = {name: [] for name in header}
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line)
        for name, cell in zip(header, row):
            try:
                x = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r}", line=line, field=name) from None
            if not math.isfinite(x):
                raise ParseError(f"non-finite value {cell!r}", line=line, field=name)
            cols[name].append(x)
    try:
        return DriveLog(cols["t_s"], cols["v_mps"], cols.get("a_mps2"), cols.get("p_bat_w"))
    except InvalidArgument as exc:
        raise ParseError(str(exc)) from None


def load_log(path) -> DriveLog:
    return read_log_csv(Path(path).read_text(encoding="utf-8"))


def save_log(log: DriveLog, path, include_accel: bool = False) -> None:
    header = ["t_s", "v_mps"] + (["a_mps2"] if include_accel else []) + (["p_bat_w"] if log.p_bat_w is not None else [])
    cols = [log.t_s, log.v_mps] + ([log.a_mps2] if include_accel else []) + (
        [log.p_bat_w] if log.p_bat_w is not None else [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(x)) for x in row])


# -- synthetic data ------------------------------------------------------------------

def drive_cycle(duration_s: float = 900.0, dt: float = 1.0, seed: int = 0, v_max: float = 33.0) -> np.ndarray:
    """Random speed profile alternating acceleration, cruise and braking phases, with stops."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s / dt))
    v = np.zeros(n)
    cur, i = 0.0, 0
    while i < n:
        target = 0.0 if rng.random() < 0.15 else rng.uniform(5.0, v_max)
        rate = rng.uniform(0.6, 2.5)
        while i < n and abs(cur - target) > 1e-9:
            step = rate * dt
            cur = min(target, cur + step) if target > cur else max(target, cur - step)
            v[i] = cur
            i += 1
        hold = int(rng.uniform(15, 60) / dt)
        v[i:i + hold] = cur
        i += hold
    return v


def simulate_log(
    params: VehicleParams,
    speed_profile,
    noise_std: float = 0.0,
    *,
    dt: float = 1.0,
    seed: int = 0,
    multiplicative: bool = False,
) -> DriveLog:
    """Battery-power trace of ``speed_profile`` under ``params`` plus Gaussian noise.

    ``multiplicative=True`` scales each sample by ``1 + N(0, noise_std)``;
    otherwise ``noise_std`` is in watts.
    """
    v = np.asarray(speed_profile, dtype=float)
    if v.ndim != 1 or np.any(v < 0) or not np.all(np.isfinite(v)):
        raise InvalidArgument("speed profile must be a finite, nonnegative 1-D array")
    if noise_std < 0:
        raise InvalidArgument("noise_std must be >= 0")
    a = central_accel(v, dt)
    p = np.asarray(battery_power_w(v, a, params), dtype=float)
    if noise_std > 0:
        eps = np.random.default_rng(seed).normal(0.0, noise_std, len(v))
        p = p * (1.0 + eps) if multiplicative else p + eps
    return DriveLog(np.arange(len(v)) * dt, v, a, p)


def infer_power(params: VehicleParams, log: DriveLog) -> np.ndarray:
    """Battery power predicted from speed and acceleration alone."""
    return np.asarray(battery_power_w(log.v_mps, log.a_mps2, params), dtype=float)


# -- loss ------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    lambda_buff: float = 1e-3
    lambda_smooth: float = 1e-2
    lambda_param: float = 1e-4
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    iterations: int = 5000
    tolerance: float = 1e-8
    n_windows: int = 1  # >1 fits piecewise-constant eta/mu tracks
    restarts: int = 0
    seed: int = 0
    min_speed_std: float = 0.5
    min_braking_samples: int = 10

    def __post_init__(self):
        if min(self.lambda_buff, self.lambda_smooth, self.lambda_param) < 0:
            raise InvalidArgument("loss weights must be >= 0")
        b = dict(DEFAULT_BOUNDS)
        b.update({k: tuple(float(x) for x in v) for k, v in self.bounds.items()})
        if set(b) != set(PARAM_NAMES):
            raise InvalidArgument(f"bounds keys must be {PARAM_NAMES}")
        for k, (lo, hi) in b.items():
            if not lo < hi:
                raise InvalidArgument(f"bounds for {k}: need lo < hi")
        if b["eta"][1] > 1 or b["mu"][1] > 1 or min(lo for lo, _ in b.values()) < 0:
            raise InvalidArgument("eta/mu bounds must lie in [0, 1] and all bounds be >= 0")
        object.__setattr__(self, "bounds", b)
        if self.iterations < 1 or self.n_windows < 1 or self.tolerance <= 0:
            raise InvalidArgument("iterations, n_windows must be >= 1 and tolerance > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorConfig":
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise InvalidArgument(f"unknown estimator option(s): {sorted(set(data) - known)}")
        return cls(**data)


@dataclass(frozen=True)
class LossBreakdown:
    data: float
    buffer: float
    smoothness: float
    prior: float

    @property
    def total(self) -> float:
        return self.data + self.buffer + self.smoothness + self.prior


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Problem:
    """Residual vector and analytic Jacobian of the hybrid loss over raw parameters.

    Raw layout: ``[c_d, c_rr, mass, p_aux, eta_1..eta_W, mu_1..mu_W]``.
    """

    def __init__(self, log: DriveLog, cfg: EstimatorConfig, base: VehicleParams, scale=None, residual_head=None):
        if log.p_bat_w is None:
            raise MissingPowerChannel("drive log has no battery power channel")
        self.cfg, self.base = cfg, base
        self.v, self.a, self.p = log.v_mps, log.a_mps2, log.p_bat_w
        self.n = len(self.v)
        self.W = cfg.n_windows
        self.win = np.minimum((np.arange(self.n) * self.W) // self.n, self.W - 1)
        self.brake = (self.a < 0).astype(float)
        self.scale = 1.0 if scale is None else float(scale)
        self.r = np.zeros(self.n) if residual_head is None else np.asarray(residual_head, dtype=float)
        lo = [cfg.bounds[k][0] for k in PARAM_NAMES[:4]] + [cfg.bounds["eta"][0]] * self.W + [cfg.bounds["mu"][0]] * self.W
        hi = [cfg.bounds[k][1] for k in PARAM_NAMES[:4]] + [cfg.bounds["eta"][1]] * self.W + [cfg.bounds["mu"][1]] * self.W
        self.lo, self.span = np.array(lo), np.array(hi) - np.array(lo)
        self.dim = 4 + 2 * self.W

    def to_phys(self, theta):
        return self.lo + self.span * _sigmoid(theta)

    def to_raw(self, x):
        u = (np.asarray(x, dtype=float) - self.lo) / self.span
        if np.any(u <= 0) or np.any(u >= 1):
            raise InvalidArgument("parameters must lie strictly inside the configured bounds")
        return np.log(u) - np.log1p(-u)

    def _power(self, x):
        c_d, c_rr, m, p_aux = x[:4]
        eta = x[4:4 + self.W][self.win]
        mu = x[4 + self.W:][self.win]
        k = 0.5 * self.base.air_density * self.base.frontal_area_m2
        g = self.base.g
        pm = c_d * k * self.v**3 + c_rr * m * g * self.v + m * self.a * self.v
        fac = 1.0 / eta - mu * self.brake
        return pm * fac + p_aux, pm, fac, eta, k, g

    def residuals(self, theta):
        x = self.to_phys(theta)
        pred, *_ = self._power(x)
        cfg = self.cfg
        parts = [(self.p - pred - self.r) / self.scale / math.sqrt(self.n)]
        parts.append(math.sqrt(cfg.lambda_buff / self.n) * self.r / self.scale)
        if self.W > 1:
            w = math.sqrt(cfg.lambda_smooth / (self.W - 1))
            parts.append(w * np.diff(x[4:4 + self.W]))
            parts.append(w * np.diff(x[4 + self.W:]))
        parts.append(math.sqrt(cfg.lambda_param) * np.asarray(theta, dtype=float))
        return np.concatenate(parts)

    def jacobian(self, theta):
        x = self.to_phys(theta)
        _, pm, fac, eta, k, g = self._power(x)
        W, n = self.W, self.n
        dx = self.span * _sigmoid(theta) * (1.0 - _sigmoid(theta))
        c = -1.0 / (self.scale * math.sqrt(n))
        J_data = np.zeros((n, self.dim))
        J_data[:, 0] = k * self.v**3 * fac
        J_data[:, 1] = x[2] * g * self.v * fac
        J_data[:, 2] = (x[1] * g * self.v + self.a * self.v) * fac
        J_data[:, 3] = 1.0
        rows = np.arange(n)
        J_data[rows, 4 + self.win] = -pm / eta**2
        J_data[rows, 4 + W + self.win] = -pm * self.brake
        blocks = [c * J_data, np.zeros((n, self.dim))]
        if W > 1:
            w = math.sqrt(self.cfg.lambda_smooth / (W - 1))
            D = np.zeros((W - 1, W))
            D[np.arange(W - 1), np.arange(W - 1)] = -1.0
            D[np.arange(W - 1), np.arange(1, W)] = 1.0
            for off in (4, 4 + W):
                blk = np.zeros((W - 1, self.dim))
                blk[:, off:off + W] = w * D
                blocks.append(blk)
        J = np.vstack(blocks) * dx[None, :]
        # the prior acts on raw values directly, no chain factor
        return np.vstack([J, math.sqrt(self.cfg.lambda_param) * np.eye(self.dim)])

    def breakdown(self, theta) -> LossBreakdown:
        res = self.residuals(theta)
        n, W = self.n, self.W
        data = float(np.sum(res[:n] ** 2))
        buff = float(np.sum(res[n:2 * n] ** 2))
        nsm = 2 * (W - 1) if W > 1 else 0
        smooth = float(np.sum(res[2 * n:2 * n + nsm] ** 2))
        prior = float(np.sum(res[2 * n + nsm:] ** 2))
        return LossBreakdown(data, buff, smooth, prior)

    def loss_and_grad(self, theta):
        res = self.residuals(theta)
        return float(res @ res), 2.0 * self.jacobian(theta).T @ res

    def params_from(self, theta) -> VehicleParams:
        x = self.to_phys(theta)
        eta = float(np.mean(x[4:4 + self.W]))
        mu = float(np.mean(x[4 + self.W:]))
        return self.base.with_(c_d=float(x[0]), c_rr=float(x[1]), mass_kg=float(x[2]), p_aux_w=float(x[3]),
                               eta=eta, mu=mu)

    def raw_from(self, params: VehicleParams, eta_track=None, mu_track=None):
        eta = np.full(self.W, params.eta) if eta_track is None else np.asarray(eta_track, dtype=float)
        mu = np.full(self.W, params.mu) if mu_track is None else np.asarray(mu_track, dtype=float)
        if eta.shape != (self.W,) or mu.shape != (self.W,):
            raise InvalidArgument(f"eta/mu tracks must have length {self.W}")
        x = np.concatenate([[params.c_d, params.c_rr, params.mass_kg, params.p_aux_w], eta, mu])
        return self.to_raw(x)


def hybrid_loss(
    params: VehicleParams,
    residual_head,
    log: DriveLog,
    cfg: EstimatorConfig = EstimatorConfig(),
    *,
    eta_track=None,
    mu_track=None,
    scale: float | None = None,
) -> LossBreakdown:
    """Loss components at ``params`` with an optional per-sample residual power channel.

    ``eta_track``/``mu_track`` (length ``cfg.n_windows``) override the
    constant efficiencies of ``params``; ``residual_head`` of ``None`` means
    zeros.
    """
    prob = _Problem(log, cfg, params, scale, residual_head)
    return prob.breakdown(prob.raw_from(params, eta_track, mu_track))


def loss_and_grad(theta_raw, log: DriveLog, cfg: EstimatorConfig = EstimatorConfig(), base=None, scale=None):
    """Total hybrid loss and its gradient with respect to the raw parameter vector."""
    prob = _Problem(log, cfg, base or default_params(), scale)
    return prob.loss_and_grad(np.asarray(theta_raw, dtype=float))


# -- estimation ----------------------------------------------------------------------

@dataclass
class EstimateResult:
    params: VehicleParams
    residual_rms_w: float
    loss: LossBreakdown
    converged: bool
    iterations: int
    condition_number: float
    eta_track: tuple[float, ...] = ()
    mu_track: tuple[float, ...] = ()
    loss_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "residual_rms_w": self.residual_rms_w,
            "loss": {"data": self.loss.data, "buffer": self.loss.buffer, "smoothness": self.loss.smoothness,
                     "prior": self.loss.prior, "total": self.loss.total},
            "converged": self.converged,
            "iterations": self.iterations,
            "condition_number": self.condition_number,
            "eta_track": list(self.eta_track),
            "mu_track": list(self.mu_track),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def identifiable_condition(log: DriveLog, params: VehicleParams) -> float:
    """Condition number of the Gauss-Newton matrix over the identifiable combinations.

    Columns are sensitivities of power to the logs of ``c_d/eta``,
    ``mass/eta``, ``c_rr``, ``mu*eta`` and ``p_aux``, each scaled to unit
    norm. Logs lacking acceleration or braking make it blow up.
    """
    v, a = log.v_mps, log.a_mps2
    b = (a < 0).astype(float)
    k = 0.5 * params.air_density * params.frontal_area_m2
    alpha, beta = params.c_d / params.eta, params.mass_kg / params.eta
    nu = params.mu * params.eta
    gain = 1.0 - nu * b
    wheel = k * alpha * v**3 + params.c_rr * beta * params.g * v + beta * a * v
    J = np.column_stack([
        gain * k * alpha * v**3,
        gain * (params.c_rr * beta * params.g * v + beta * a * v),
        gain * params.c_rr * beta * params.g * v,
        -nu * b * wheel,
        np.full(len(v), params.p_aux_w),
    ])
    norms = np.linalg.norm(J, axis=0)
    if np.any(norms == 0):
        return math.inf
    sv = np.linalg.svd(J / norms, compute_uv=False)
    return float((sv[0] / sv[-1]) ** 2) if sv[-1] > 0 else math.inf


def check_excitation(log: DriveLog, cfg: EstimatorConfig) -> None:
    if len(log) < MIN_SAMPLES:
        raise InsufficientData(f"need at least {MIN_SAMPLES} samples, got {len(log)}")
    if float(np.std(log.v_mps)) < cfg.min_speed_std:
        raise InsufficientExcitation("speed barely varies; parameters are not identifiable")
    moving = log.v_mps > 0
    if int(np.sum((log.a_mps2 < 0) & moving)) < cfg.min_braking_samples:
        raise InsufficientExcitation("too few braking samples to identify regeneration efficiency")
    if int(np.sum((log.a_mps2 > 0) & moving)) < cfg.min_braking_samples:
        raise InsufficientExcitation("too few accelerating samples to identify mass")


def estimate(log: DriveLog, cfg: EstimatorConfig = EstimatorConfig(), base: VehicleParams | None = None) -> EstimateResult:
    """Fit the six vehicle parameters to a logged power trace.

    Fixed quantities (frontal area, air density, gravity, battery size) come
    from ``base``. Starts from the box midpoints, plus ``cfg.restarts``
    seeded random starts; the lowest final loss wins.
    """
    if log.p_bat_w is None:
        raise MissingPowerChannel("drive log has no battery power channel")
    check_excitation(log, cfg)
    prob = _Problem(log, cfg, base or default_params())
    history: list[float] = []

    def fun(theta):
        res = prob.residuals(theta)
        loss = float(res @ res)
        if not math.isfinite(loss):
            raise NonFiniteLoss("hybrid loss became non-finite")
        history.append(min(loss, history[-1]) if history else loss)
        return res

    rng = np.random.default_rng(cfg.seed)
    starts = [np.zeros(prob.dim)] + [rng.normal(0.0, 1.0, prob.dim) for _ in range(cfg.restarts)]
    best = None
    for x0 in starts:
        sol = least_squares(fun, x0, jac=prob.jacobian, method="trf", ftol=cfg.tolerance, xtol=cfg.tolerance,
                            gtol=cfg.tolerance, max_nfev=cfg.iterations, x_scale="jac")
        if best is None or sol.cost < best.cost:
            best = sol
    theta = best.x
    fitted = prob.params_from(theta)
    cond = identifiable_condition(log, fitted)
    x = prob.to_phys(theta)
    pred, *_ = prob._power(x)
    return EstimateResult(
        params=fitted,
        residual_rms_w=float(np.sqrt(np.mean((log.p_bat_w - pred) ** 2))),
        loss=prob.breakdown(theta),
        converged=bool(best.status > 0),
        iterations=int(best.nfev),
        condition_number=cond,
        eta_track=tuple(float(e) for e in x[4:4 + prob.W]),
        mu_track=tuple(float(m) for m in x[4 + prob.W:]),
        loss_history=history,
    )
