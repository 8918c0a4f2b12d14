import math

import numpy as np
import pytest

from pfcharge.config import config_from_dict, config_to_dict, load_scenario
from pfcharge.network import Branch, Bus, build_network, star_network
from pfcharge.powerflow import two_bus_capacity
from pfcharge.simulator import (PoissonArrivals, ScriptedArrival, Simulation, SimulationConfig, check_invariants,
                                heterogeneous_budgets, run, sample_arrivals, scenario_heterogeneous_aggressive,
                                write_outputs)
from pfcharge.strategies import Departure, Strategy, VehicleParams


def two_bus():
    return build_network([Bus(0, is_root=True, chargeable=False), Bus(1)], [Branch(0, 1, 0.1, 0.6)])


def test_empty_network_steps_without_solving():
    cfg = SimulationConfig(network=star_network(3), horizon=5.0)
    trace = run(cfg)
    assert len(trace.steps) == 5 and trace.solves == 0
    assert all(s.status == "Idle" for s in trace.steps)
    assert [s.t for s in trace.steps] == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_single_vehicle_charges_at_capacity():
    p_star = two_bus_capacity(0.1, 0.6)
    params = VehicleParams(B_max=2.0, W_max=1e9, T_max=100.0)
    cfg = SimulationConfig(network=two_bus(), horizon=10.0, scripted=(ScriptedArrival(0.0, 1, params),))
    trace = run(cfg)
    Bs = [row[5] for row in trace.rows]
    n_full = math.ceil(2.0 / p_star)
    for k, B in enumerate(Bs[:n_full - 1], start=1):
        assert B == pytest.approx(k * p_star, rel=1e-7)
    assert Bs[-1] == 2.0 and len(Bs) == n_full
    assert trace.departures[0].reason is Departure.FULL_BATTERY
    assert trace.departures[0].t_departure == float(n_full)


def test_aggressive_arrival_joins_at_t100():
    cfg = scenario_heterogeneous_aggressive("UT")
    trace = run(cfg)
    sizes = {s.t: len(s.connected) for s in trace.steps}
    assert sizes[99.0] == 9 and sizes[100.0] == 10
    budgets = sorted(a.params.W_max for a in cfg.scripted)[:9]
    assert budgets[0] == 500.0 and budgets[-1] == pytest.approx(1.3**8 * 500)
    assert max(a.params.W_max for a in cfg.scripted) == 10_000_000.0
    # every incumbent finishes or hits a limit within the horizon
    assert {d.id for d in trace.departures} >= set(range(9))
    assert check_invariants(trace, cfg) == []


def test_heterogeneous_budgets():
    b = heterogeneous_budgets()
    # 1.3**8 = 8.15730721, so the bus-10 budget is 4078.653605
    assert b[0] == 500.0 and b[8] == pytest.approx(4078.653605, rel=1e-12)


def test_poisson_zero_rate_has_no_arrivals():
    cfg = SimulationConfig(network=star_network(3), horizon=50.0,
                           poisson=PoissonArrivals(0.0, VehicleParams(20, 500, 300)))
    assert run(cfg).arrivals == []
    assert len(sample_arrivals(np.random.default_rng(0), 0.0, 100.0)) == 0


def test_poisson_counts_and_gaps():
    rate, H = 0.05, 10_000.0
    counts, gaps = [], []
    for seed in range(1000):
        t = sample_arrivals(np.random.default_rng(seed), rate, H)
        counts.append(len(t))
        gaps.extend(np.diff(np.concatenate([[0.0], t])))
    counts = np.array(counts)
    se = counts.std(ddof=1) / math.sqrt(len(counts))
    assert abs(counts.mean() - rate * H) <= 3 * se
    gaps = np.array(gaps)
    assert abs(gaps.mean() - 1 / rate) <= 3 * gaps.std(ddof=1) / math.sqrt(len(gaps))
    t = sample_arrivals(np.random.default_rng(1), rate, H)
    assert np.all(np.diff(t) > 0) and t[-1] <= H


def poisson_config(strategy="AF", seed=3, horizon=600.0, rate=0.03):
    return SimulationConfig(network=star_network(10), horizon=horizon, seed=seed,
                            poisson=PoissonArrivals(rate, VehicleParams(20, 500, 300, strategy=strategy)))


def test_determinism_bytes(tmp_path):
    a, b = run(poisson_config()), run(poisson_config())
    assert a.trace_csv() == b.trace_csv()
    assert a.departures_csv() == b.departures_csv()
    c = run(poisson_config(seed=4))
    assert c.trace_csv() != a.trace_csv()


@pytest.mark.parametrize("strategy", list(Strategy))
def test_accounting_conservation(strategy):
    cfg = poisson_config(strategy)
    trace = run(cfg)
    energy, spent = {}, {}
    for t, vid, bus, w, P, B, W in trace.rows:
        energy[vid] = energy.get(vid, 0.0) + P * cfg.dt
        spent[vid] = spent.get(vid, 0.0) + w * cfg.dt
    for d in trace.departures:
        # the last step may truncate at B_max
        assert d.energy <= energy[d.id] + 1e-12
        assert d.energy == pytest.approx(min(energy[d.id], d.B_max), rel=1e-9, abs=1e-12)
        assert d.W_spent == pytest.approx(min(spent[d.id], d.W_max), rel=1e-12)
        assert d.duration <= 300.0 + cfg.dt
    assert check_invariants(trace, cfg) == []


def test_capacity_release_single_vehicle():
    # a lone UT vehicle's power does not drop as others leave
    cfg = scenario_heterogeneous_aggressive("UT")
    trace = run(cfg)
    P = {}
    for t, vid, bus, w, p, B, W in trace.rows:
        if vid == 8:
            P[t] = (p, len(next(s for s in trace.steps if s.t == t).connected))
    for t in sorted(P)[1:]:
        prev = P[t - 1]
        if P[t][1] < prev[1]:
            assert P[t][0] >= prev[0] - 1e-12


def test_config_validation():
    net = star_network(3)
    with pytest.raises(ValueError):
        SimulationConfig(network=net, horizon=10.5)
    with pytest.raises(ValueError):
        SimulationConfig(network=net, horizon=10.0, dt=0.0)
    with pytest.raises(ValueError):
        SimulationConfig(network=net, horizon=10.0, scripted=(ScriptedArrival(0.0, 1, VehicleParams(20, 5, 3)),))
    with pytest.raises(ValueError):
        PoissonArrivals(-1.0, VehicleParams(20, 5, 3))


def test_weighted_bus_policy():
    cfg = SimulationConfig(network=star_network(4), horizon=400.0, seed=1,
                           poisson=PoissonArrivals(0.05, VehicleParams(20, 500, 300), bus_policy="weighted",
                                                   buses=(2, 3), bus_weights=(1.0, 0.0)))
    trace = run(cfg)
    assert trace.arrivals and {a.bus for a in trace.arrivals} == {2}


def test_censoring_and_outputs(tmp_path):
    cfg = poisson_config(horizon=200.0)
    trace = run(cfg)
    assert trace.censored
    assert len(trace.arrivals) == len(trace.departures) + len(trace.censored)
    paths = write_outputs(trace, tmp_path / "out", cfg)
    assert (tmp_path / "out" / "trace.csv").read_text() == trace.trace_csv()
    assert set(paths) == {"trace", "departures", "summary"}


def test_fine_time_step_matches_config_multiple():
    cfg = SimulationConfig(network=two_bus(), horizon=3.0, dt=0.25,
                           scripted=(ScriptedArrival(0.1, 1, VehicleParams(20, 500, 300)),))
    trace = run(cfg)
    assert len(trace.steps) == 12
    assert trace.arrivals[0].t_admitted == 0.25


def test_scenario_round_trip(tmp_path):
    import json
    cfg = scenario_heterogeneous_aggressive("AFT")
    doc = config_to_dict(cfg)
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    again = load_scenario(path)
    assert again == cfg
    poisson = poisson_config("UC")
    assert config_from_dict(config_to_dict(poisson)) == poisson
