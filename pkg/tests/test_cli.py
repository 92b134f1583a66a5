import json

import pytest

from evroute.cli import EXIT_INPUT, EXIT_NO_RESULT, EXIT_OK, EXIT_SNAP, EXIT_TRAIN, _seed, build_parser, main
from evroute.energy import default_params
from evroute.estimator import DriveLog, drive_cycle, save_log, simulate_log
from evroute.road_graph import gen_corridor, save_graph

P = default_params()


@pytest.fixture
def corridor(tmp_path):
    g = gen_corridor(20, 30.0, chargers=[10])
    path = tmp_path / "g.json"
    save_graph(g, path)
    return g, str(path)


def _latlon(g, v):
    p = g.pos(v)
    return f"{p.lat},{p.lon}"


def test_plan_and_export(corridor, tmp_path, capsys):
    g, gp = corridor
    out = tmp_path / "plan.json"
    rc = main(["plan", "--graph", gp, "--from", _latlon(g, 0), "--to", _latlon(g, 19), "--out", str(out)])
    assert rc == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    saved = json.loads(out.read_text())
    assert printed == saved and saved["totals"]["stops"] == 1
    geo = tmp_path / "plan.geojson"
    assert main(["export-geojson", str(out), "--out", str(geo)]) == EXIT_OK
    assert json.loads(geo.read_text())["type"] == "FeatureCollection"


def test_plan_is_byte_identical_across_runs(corridor, tmp_path):
    g, gp = corridor
    outs = []
    for i in range(2):
        out = tmp_path / f"p{i}.json"
        assert main(["plan", "--graph", gp, "--from", _latlon(g, 2), "--to", _latlon(g, 17), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_exit_codes(corridor, tmp_path, capsys):
    g, gp = corridor
    assert main(["plan", "--graph", gp, "--from", "10,10", "--to", _latlon(g, 19)]) == EXIT_SNAP
    assert main(["plan", "--graph", str(tmp_path / "missing.json"), "--from", "0,0", "--to", "0,1"]) == EXIT_INPUT
    (tmp_path / "bad.json").write_text("{\n nodes: 1}")
    assert main(["plan", "--graph", str(tmp_path / "bad.json"), "--from", "0,0", "--to", "0,1"]) == EXIT_INPUT
    assert main(["plan", "--graph", gp, "--from", "zero", "--to", "0,1"]) == EXIT_INPUT
    assert main(["plan", "--graph", gp, "--from", _latlon(g, 0), "--to", _latlon(g, 19), "--soc0", "30"]) == EXIT_NO_RESULT
    assert main(["plan", "--graph", gp, "--from", _latlon(g, 0), "--to", _latlon(g, 1), "--soc0", "130"]) == EXIT_INPUT
    cfg = tmp_path / "far.toml"
    cfg.write_text("[curriculum]\ndistances_km = [5000.0]\n")
    assert main(["train", "--graph", gp, "--config", str(cfg), "--out", str(tmp_path / "ck.json")]) == EXIT_TRAIN
    cfg.write_text("[ppo]\nlearning_rate = 1\n")
    assert main(["train", "--graph", gp, "--config", str(cfg), "--out", str(tmp_path / "ck.json")]) == EXIT_INPUT
    assert main(["export-geojson", str(tmp_path / "nope.json")]) == EXIT_INPUT
    assert main(["bogus"]) == 2
    err = capsys.readouterr().err
    assert "evroute plan:" in err


def test_config_precedence(corridor, tmp_path, capsys):
    g, gp = corridor
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'graph = "{gp}"\n[plan]\nfrom = "{_latlon(g, 0)}"\nto = "{_latlon(g, 19)}"\nsoc0 = 30.0\n')
    assert main(["plan", "--config", str(cfg)]) == EXIT_NO_RESULT
    assert main(["plan", "--config", str(cfg), "--soc0", "80"]) == EXIT_OK
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"graph": gp, "plan": {"from": [g.pos(0).lat, g.pos(0).lon], "to": _latlon(g, 3)}}))
    assert main(["plan", "--config", str(js)]) == EXIT_OK
    (tmp_path / "broken.toml").write_text("graph = \n")
    assert main(["plan", "--config", str(tmp_path / "broken.toml")]) == EXIT_INPUT


def test_seed_precedence(monkeypatch):
    parser = build_parser()
    args = parser.parse_args(["train"])
    monkeypatch.delenv("VEGA_SEED", raising=False)
    assert _seed(args, {"seed": 3}) == 3
    assert _seed(args, {}) == 0
    monkeypatch.setenv("VEGA_SEED", "11")
    assert _seed(args, {"seed": 3}) == 11
    assert _seed(parser.parse_args(["train", "--seed", "5"]), {"seed": 3}) == 5


def test_train_writes_checkpoint_and_log(corridor, tmp_path, capsys):
    g, gp = corridor
    cfg = tmp_path / "t.toml"
    cfg.write_text(
        "[curriculum]\ndistances_km = [60.0]\n"
        "[ppo]\nhidden = [8]\nn_envs = 2\nbatch_start = 32\nbatch_end = 32\nminibatch = 16\nepochs = 1\n"
        "p_follow_decay_episodes = 4\nmax_episodes_per_stage = 6\n"
    )
    ck = tmp_path / "ck.json"
    assert main(["train", "--graph", gp, "--config", str(cfg), "--out", str(ck), "--seed", "2"]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    log = (tmp_path / "ck.log.csv").read_text()
    assert info["training_log"].endswith("ck.log.csv") and log.startswith("stage,episode,")
    assert json.loads(ck.read_text())["config"]["ppo"]["seed"] == 2
    rc = main(["plan", "--graph", gp, "--mode", "policy", "--checkpoint", str(ck),
               "--from", _latlon(g, 0), "--to", _latlon(g, 2)])
    assert rc in (EXIT_OK, EXIT_NO_RESULT)


def test_estimate_command(tmp_path, capsys):
    path = tmp_path / "log.csv"
    save_log(simulate_log(P, drive_cycle(900, seed=0)), path)
    out = tmp_path / "est.json"
    assert main(["estimate", "--log", str(path), "--out", str(out)]) == EXIT_OK
    res = json.loads(out.read_text())
    assert res["converged"] and abs(res["params"]["c_rr"] / P.c_rr - 1) < 0.05
    save_log(DriveLog.from_speed(drive_cycle(900, seed=0)), path)
    assert main(["estimate", "--log", str(path)]) == EXIT_NO_RESULT
    save_log(simulate_log(P, drive_cycle(100, seed=0)), path)
    assert main(["estimate", "--log", str(path)]) == EXIT_INPUT
