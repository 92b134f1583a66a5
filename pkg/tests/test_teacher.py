import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evroute.charging import charge_time_min, default_curve
from evroute.energy import default_params, segment_cost
from evroute.errors import InvalidArgument, NoNeighbors
from evroute.road_graph import Edge, GeoPoint, Node, RoadGraph, gen_corridor, gen_random
from evroute.routeplan import build_plan, replay_feasible
from evroute.teacher import (
    CHARGE,
    TeacherConfig,
    TeacherPlan,
    greedy_hint,
    heuristic,
    move_slots,
    oracle_optimal,
    plan,
    plan_cost,
    shortlist,
    teacher_action,
)

from oracles import dijkstra_oracle

P = default_params()
CURVE = default_curve()


def instance(i):
    rng = np.random.default_rng(1000 + i)
    g = gen_random(int(rng.integers(2, 13)), seed=i)
    cfg = TeacherConfig(
        w_t=float(rng.choice([1.0, 0.5, 0.0])),
        w_e=float(rng.choice([0.0, 1.0, 3.0])),
        w_c=float(rng.choice([0.0, 1.0])),
        tariff_p=0.4, tariff_p_min=0.2,
    )
    if cfg.w_t == cfg.w_e == cfg.w_c == 0:
        cfg = TeacherConfig()
    start, goal = (int(x) for x in rng.choice(len(g), 2, replace=len(g) < 2))
    soc0 = float(rng.uniform(5, 100))
    return g, cfg, start, goal, soc0


INSTANCES = [instance(i) for i in range(240)]


def test_unbudgeted_plan_matches_oracles_on_random_graphs():
    n_feasible = 0
    for g, cfg, s, t, soc0 in INSTANCES:
        p = plan(g, cfg, P, s, t, soc0)
        o = oracle_optimal(g, cfg, P, s, t, soc0)
        assert p.cost == o.cost
        assert p.feasible == o.feasible
        assert p.cost == pytest.approx(dijkstra_oracle(g, cfg, P, s, t, soc0), rel=1e-12, abs=1e-9)
        if p.feasible:
            n_feasible += 1
            assert p.path[0] == s and p.path[-1] == t
            assert plan_cost(g, cfg, P, p.path, p.charge_idx, soc0) == pytest.approx(p.cost, rel=1e-12)
    assert 50 < n_feasible < len(INSTANCES)


def test_heuristic_admissible_and_consistent():
    for g, cfg, _, t, _ in INSTANCES:
        h = [heuristic(g, v, t, cfg, P) for v in range(len(g))]
        assert h[t] == 0.0
        price = cfg.w_e + cfg.w_c * cfg.tariff_p_min
        for e in g.edges():
            c = segment_cost(e, P)
            edge_lb = cfg.w_t * 60 * c.time_h + price * c.energy_kwh
            assert h[e.src] <= edge_lb + h[e.dst] + 1e-9
        for v in range(len(g)):
            best = oracle_optimal(g, cfg, P, v, t, 100.0).cost
            assert h[v] <= best + 1e-9


def test_plans_replay_in_continuous_soc():
    for g, cfg, s, t, soc0 in INSTANCES[:80]:
        p = plan(g, cfg, P, s, t, soc0)
        if not p.feasible:
            continue
        rp = build_plan(g, P, p.path, {i: cfg.charge_cap_pct for i in p.charge_idx}, soc0)
        assert replay_feasible(rp, P, soc0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 239))
def test_budget_monotone(i):
    g, cfg, s, t, soc0 = INSTANCES[i]
    costs = []
    for n in (1, 2, 4, 8, 16, 64, 256, 100_000):
        costs.append(plan(g, TeacherConfig(**{**cfg.__dict__, "n_exp": n}), P, s, t, soc0).cost)
    assert all(a >= b for a, b in zip(costs, costs[1:]))
    assert costs[-1] == oracle_optimal(g, cfg, P, s, t, soc0).cost


def test_budget_exhaustion_returns_prefix():
    g = gen_corridor(10, 30, 1, 100)
    p = plan(g, TeacherConfig(n_exp=3), P, 0, 9, 90)
    assert not p.feasible and p.cost == math.inf
    assert p.path[0] == 0 and p.expansions_used == 3


def test_start_equals_goal():
    g = gen_corridor(3, 30)
    p = plan(g, TeacherConfig(), P, 1, 1, 50)
    assert p == TeacherPlan((1,), 0.0, True, 0)


def test_forced_charge_on_corridor():
    g = gen_corridor(20, 30.0, chargers=[10])
    p = plan(g, TeacherConfig(), P, 0, 19, 80.0)
    assert p.feasible and p.path == tuple(range(20))
    assert p.charge_idx == (10,)
    # 19 hops of 30 km at 100 km/h plus one charge session
    drop = segment_cost(Edge(0, 1, 30.0, 100.0), P).soc_drop_pct
    k = 80
    for _ in range(10):
        k = math.floor(k - drop + 1e-9)
    expected = 19 * 18.0 + charge_time_min(CURVE, k, 80)
    assert p.cost == pytest.approx(expected, rel=1e-12)


def test_no_route_when_soc_too_low():
    g = gen_corridor(5, 100, charger_every=0)
    assert not plan(g, TeacherConfig(), P, 0, 4, 50).feasible
    assert not oracle_optimal(g, TeacherConfig(), P, 0, 4, 50).feasible


def test_config_validation():
    with pytest.raises(InvalidArgument):
        TeacherConfig(w_t=-1)
    with pytest.raises(InvalidArgument):
        TeacherConfig(tariff_p=0.1, tariff_p_min=0.2)
    with pytest.raises(InvalidArgument):
        TeacherConfig(n_exp=0)
    g = gen_corridor(3, 30, speed_kmh=100)
    with pytest.raises(InvalidArgument):
        heuristic(g, 0, 2, TeacherConfig(v_max_kmh=50), P)
    with pytest.raises(InvalidArgument):
        plan(g, TeacherConfig(), P, 0, 2, 120)


def test_shortlist_hint_and_action():
    g = gen_corridor(20, 30.0, chargers=[10])
    p = plan(g, TeacherConfig(), P, 10, 19, 20.0)
    assert p.charge_idx == (0,)
    s = shortlist(p, 10, g)
    assert CHARGE in s
    assert teacher_action(p, 10, g, 19) == CHARGE
    assert move_slots(g, 10) == [9, 11]
    p2 = plan(g, TeacherConfig(), P, 3, 19, 100.0)
    assert shortlist(p2, 3, g) == frozenset({1})
    assert teacher_action(p2, 3, g, 19) == 1
    assert shortlist(p2, 4, g) == frozenset()
    assert greedy_hint(g, 3, 0) == 0
    lone = RoadGraph.build([Node(0, GeoPoint(0, 0)), Node(1, GeoPoint(0, 1))], [])
    with pytest.raises(NoNeighbors):
        greedy_hint(lone, 0, 1)
