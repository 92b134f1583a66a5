"""``evroute`` command line: plan, train, estimate, export-geojson.

Exit codes: 0 ok, 2 bad input (arguments, files, parse errors), 3 no result
(no feasible path, missing power channel, unidentifiable log), 4 a
coordinate did not snap to the graph, 5 no curriculum stage was trainable.
JSON goes to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import estimator as est
from .charging import default_curve, load_curve
from .energy import default_params, load_params
from .env import Curriculum, EnvConfig
from .errors import (
    EvRouteError,
    InsufficientData,
    InsufficientExcitation,
    InvalidArgument,
    MissingPowerChannel,
    NoFeasiblePath,
    NoGoalAtDistance,
    ParseError,
    SnapFailure,
)
from .ppo import PpoConfig, load_checkpoint, save_checkpoint, train
from .road_graph import GeoPoint, load_graph
from .routeplan import load_plan, plan_with_policy, plan_with_teacher, to_geojson, validate_geojson
from .teacher import TeacherConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_INPUT, EXIT_NO_RESULT, EXIT_SNAP, EXIT_TRAIN = 0, 2, 3, 4, 5
SNAP_RADIUS_KM = 50.0
SEED_ENV = "VEGA_SEED"

log = logging.getLogger("evroute")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def load_config(path) -> dict:
    """Read a TOML or JSON config (by extension; TOML otherwise)."""
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_INPUT, f"config file not found: {path}")
    text = p.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if p.suffix.lower() == ".json" else tomllib.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{path}: line {exc.lineno}: {exc.msg}") from None
    except tomllib.TOMLDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(EXIT_INPUT, f"{path}: top level must be a table/object")
    return data


def parse_latlon(text: str) -> GeoPoint:
    try:
        lat, lon = (float(x) for x in text.split(","))
        return GeoPoint(lat, lon)
    except (ValueError, InvalidArgument):
        raise argparse.ArgumentTypeError(f"expected 'lat,lon', got {text!r}") from None


def _resolve(args, cfg: dict, name: str, default=None):
    """Flag value if given on the command line, else the config file entry, else ``default``."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    section = cfg.get(args.command.replace("-", "_"), {})
    for table in (section, cfg):
        if isinstance(table, dict) and name in table:
            return table[name]
    return default


def _seed(args, cfg):
    if args.seed is not None:
        return args.seed
    if os.environ.get(SEED_ENV):
        try:
            return int(os.environ[SEED_ENV])
        except ValueError:
            raise CliError(EXIT_INPUT, f"{SEED_ENV} must be an integer") from None
    return int(_resolve(args, cfg, "seed", 0))


def _require(args, cfg, name):
    v = _resolve(args, cfg, name)
    if v is None:
        raise CliError(EXIT_INPUT, f"--{name.replace('_', '-')} is required (flag or config)")
    return v


def _params(args, cfg):
    path = _resolve(args, cfg, "params")
    return load_params(path) if path else default_params()


def _curve(args, cfg):
    path = _resolve(args, cfg, "curve")
    return load_curve(path) if path else default_curve()


def _snap(g, p: GeoPoint, what: str) -> int:
    node, d = g.nearest_node(p)
    if d > SNAP_RADIUS_KM:
        raise SnapFailure(f"{what} ({p.lat}, {p.lon}) is {d:.1f} km from the nearest node (limit {SNAP_RADIUS_KM} km)")
    return node


def _emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


# -- commands ----------------------------------------------------------------------

def cmd_plan(args, cfg) -> int:
    g = load_graph(_require(args, cfg, "graph"))
    params = _params(args, cfg)
    curve = _curve(args, cfg)
    src = args.from_ or _latlon_from_cfg(cfg, "from")
    dst = args.to or _latlon_from_cfg(cfg, "to")
    if src is None or dst is None:
        raise CliError(EXIT_INPUT, "--from and --to are required")
    soc0 = float(_resolve(args, cfg, "soc0", 80.0))
    if not 0 <= soc0 <= 100:
        raise CliError(EXIT_INPUT, "--soc0 must lie in [0, 100]")
    start, goal = _snap(g, src, "origin"), _snap(g, dst, "destination")
    mode = _resolve(args, cfg, "mode", "teacher")
    if mode == "teacher":
        tcfg = TeacherConfig(**cfg.get("teacher", {}))
        plan = plan_with_teacher(g, params, start, goal, soc0, tcfg, curve)
    elif mode == "policy":
        ckpt = _require(args, cfg, "checkpoint")
        net, meta = load_checkpoint(ckpt)
        env_cfg = EnvConfig(**meta.get("env", {}))
        curriculum = Curriculum(tuple(meta.get("curriculum", {}).get("distances_km", Curriculum().distances_km)),
                                meta.get("curriculum", {}).get("tolerance", 0.2))
        plan = plan_with_policy(g, params, net, env_cfg, curriculum, start, goal, soc0, curve)
    else:
        raise CliError(EXIT_INPUT, f"unknown mode {mode!r}")
    plan.check()
    _emit(plan.to_dict(), _resolve(args, cfg, "out"))
    return EXIT_OK


def _latlon_from_cfg(cfg, key):
    v = cfg.get("plan", {}).get(key, cfg.get(key))
    if v is None:
        return None
    try:
        return parse_latlon(v) if isinstance(v, str) else GeoPoint(float(v[0]), float(v[1]))
    except (argparse.ArgumentTypeError, TypeError, ValueError, IndexError, InvalidArgument):
        raise CliError(EXIT_INPUT, f"config entry {key!r} must be 'lat,lon' or [lat, lon]") from None


def training_setup(cfg: dict, seed: int):
    """Build (PpoConfig, EnvConfig, TeacherConfig, Curriculum) from a config mapping."""
    ppo_cfg = PpoConfig.from_dict({**cfg.get("ppo", {}), "seed": seed})
    env_cfg = EnvConfig(**cfg.get("env", {}))
    tcfg = TeacherConfig(**{"charge_cap_pct": env_cfg.charge_cap_pct, **cfg.get("teacher", {})})
    cur = cfg.get("curriculum", {})
    if "distances_km" in cur:
        curriculum = Curriculum(tuple(float(d) for d in cur["distances_km"]), float(cur.get("tolerance", 0.2)))
    else:
        curriculum = Curriculum.standard(bool(cur.get("expanded", False)))
    return ppo_cfg, env_cfg, tcfg, curriculum


def cmd_train(args, cfg) -> int:
    g = load_graph(_require(args, cfg, "graph"))
    params = _params(args, cfg)
    out = _require(args, cfg, "out")
    seed = _seed(args, cfg)
    try:
        ppo_cfg, env_cfg, tcfg, curriculum = training_setup(cfg, seed)
    except TypeError as exc:
        raise CliError(EXIT_INPUT, f"bad training config: {exc}") from None
    result = train(g, params, curriculum, ppo_cfg, env_cfg, tcfg, curve=_curve(args, cfg))
    log_path = _resolve(args, cfg, "log") or str(Path(out).with_suffix(".log.csv"))
    Path(log_path).write_text(result.log_csv(), encoding="utf-8")
    meta = {
        "ppo": {**{k: v for k, v in ppo_cfg.__dict__.items()}, "hidden": list(ppo_cfg.hidden)},
        "env": dict(env_cfg.__dict__),
        "teacher": dict(tcfg.__dict__),
        "curriculum": {"distances_km": list(curriculum.distances_km), "tolerance": curriculum.tolerance},
    }
    digest = save_checkpoint(out, result.policy, meta)
    _emit({"checkpoint": str(out), "config_hash": digest, "training_log": log_path,
           "stages": result.stage_metrics}, None)
    return EXIT_OK


def cmd_estimate(args, cfg) -> int:
    drive = est.load_log(_require(args, cfg, "log"))
    ecfg = est.EstimatorConfig.from_dict({**cfg.get("estimator", {}), "seed": _seed(args, cfg)})
    result = est.estimate(drive, ecfg, _params(args, cfg))
    _emit(result.to_dict(), _resolve(args, cfg, "out"))
    return EXIT_OK


def cmd_export_geojson(args, cfg) -> int:
    plan = load_plan(args.plan)
    doc = to_geojson(plan)
    validate_geojson(doc)
    _emit(doc, args.out)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file; flags take precedence over its entries")
    common.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="evroute", description="Charge-aware EV routing tools.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="plan a route and print it as JSON")
    p.add_argument("--graph")
    p.add_argument("--params")
    p.add_argument("--curve")
    p.add_argument("--from", dest="from_", type=parse_latlon, metavar="LAT,LON")
    p.add_argument("--to", type=parse_latlon, metavar="LAT,LON")
    p.add_argument("--soc0", type=float)
    p.add_argument("--mode", choices=("teacher", "policy"))
    p.add_argument("--checkpoint")
    p.add_argument("--out")

    t = sub.add_parser("train", parents=[common], help="curriculum PPO training")
    t.add_argument("--graph")
    t.add_argument("--params")
    t.add_argument("--curve")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="training-log CSV path (default: next to the checkpoint)")

    e = sub.add_parser("estimate", parents=[common], help="fit vehicle parameters to a drive log")
    e.add_argument("--log", help="CSV with t_s,v_mps[,a_mps2][,p_bat_w]")
    e.add_argument("--params", help="supplies the fixed quantities (area, air density, battery)")
    e.add_argument("--out")

    x = sub.add_parser("export-geojson", parents=[common], help="convert a plan JSON to GeoJSON")
    x.add_argument("plan")
    x.add_argument("--out")
    return ap


COMMANDS = {"plan": cmd_plan, "train": cmd_train, "estimate": cmd_estimate, "export-geojson": cmd_export_geojson}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else {}
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except SnapFailure as exc:
        code, msg = EXIT_SNAP, str(exc)
    except (NoFeasiblePath, MissingPowerChannel, InsufficientExcitation) as exc:
        code, msg = EXIT_NO_RESULT, str(exc)
    except NoGoalAtDistance as exc:
        code, msg = EXIT_TRAIN, str(exc)
    except (ParseError, InvalidArgument, InsufficientData) as exc:
        code, msg = EXIT_INPUT, str(exc)
    except EvRouteError as exc:
        code, msg = EXIT_NO_RESULT, str(exc)
    except OSError as exc:
        code, msg = EXIT_INPUT, f"{exc.filename or ''}: {exc.strerror or exc}"
    print(f"evroute {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
