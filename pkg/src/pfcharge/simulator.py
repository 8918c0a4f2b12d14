"""Discrete-time charging simulation.

Every step runs, in order:

1. each connected vehicle posts a weight through its strategy,
2. one allocation solve over the vehicles with positive weight,
3. battery and budget accrual over ``dt``,
4. disconnection checks at the end of the step,
5. admission of arrivals scheduled in ``(t, t + dt]``,
6. ``t += dt``.

A failed solve aborts the run with a :class:`SimulationError`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .allocation import AllocationRequest, DEFAULT_MAX_ITER, DEFAULT_TOL, Status, allocate
from .network import NetworkModel, star_network, voltage_limits
from .strategies import (Departure, Strategy, VehicleParams, VehicleState, accrue, post_weight,
                         should_disconnect)

TRACE_COLUMNS = ("t", "id", "bus", "w", "P", "B", "W_spent")
DEPARTURE_COLUMNS = ("id", "bus", "strategy", "reason", "t_arrival", "t_departure", "B", "B_max",
                     "W_spent", "W_max", "duration", "energy", "price", "price_defined")

# star scenario constants
STAR_R, STAR_X = 0.1, 0.6
AGGRESSIVE_BUS = 11
AGGRESSIVE_ARRIVAL = 100.0


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None, t: float | None = None,
                 status: str | None = None):
        super().__init__(message)
        self.step = step
        self.t = t
        self.status = status

    def to_dict(self) -> dict:
        return {"error": str(self), "step": self.step, "t": self.t, "status": self.status}


@dataclass(frozen=True)
class ScriptedArrival:
    time: float
    bus: int
    params: VehicleParams
    B0: float = 0.0


@dataclass(frozen=True)
class PoissonArrivals:
    """Poisson arrival stream with one parameter template for all vehicles.

    ``bus_policy`` is ``"uniform"`` over ``buses`` (default: every chargeable
    bus) or ``"weighted"`` with ``bus_weights`` aligned to ``buses``.
    """

    rate: float
    template: VehicleParams
    bus_policy: str = "uniform"
    buses: tuple[int, ...] | None = None
    bus_weights: tuple[float, ...] | None = None
    B0: float = 0.0

    def __post_init__(self):
        if not (self.rate >= 0 and math.isfinite(self.rate)):
            raise ValueError(f"arrival rate must be non-negative, got {self.rate}")
        if self.bus_policy not in ("uniform", "weighted"):
            raise ValueError(f"unknown bus policy {self.bus_policy!r}")
        if self.bus_policy == "weighted":
            if self.buses is None or self.bus_weights is None or len(self.buses) != len(self.bus_weights):
                raise ValueError("weighted bus policy needs buses and matching bus_weights")


@dataclass(frozen=True)
class SimulationConfig:
    network: NetworkModel
    horizon: float
    dt: float = 1.0
    scripted: tuple[ScriptedArrival, ...] = ()
    poisson: PoissonArrivals | None = None
    seed: int = 0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    v_nominal: float = 1.0
    power_cap: float | None = None

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        n = self.horizon / self.dt
        if not (self.horizon > 0) or abs(n - round(n)) > 1e-9 * max(n, 1.0):
            raise ValueError(f"horizon {self.horizon} is not a positive multiple of dt {self.dt}")
        chargeable = set(self.network.chargeable_buses)
        for a in self.scripted:
            if a.bus not in chargeable:
                raise ValueError(f"scripted arrival at non-chargeable bus {a.bus}")
            if not (0 <= a.B0 <= a.params.B_max):
                raise ValueError(f"initial battery {a.B0} outside [0, B_max]")
        if self.poisson is not None:
            for bus in self.poisson.buses or ():
                if bus not in chargeable:
                    raise ValueError(f"poisson bus {bus} is not chargeable")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class DepartureRecord:
    id: int
    bus: int
    strategy: str
    reason: Departure
    t_arrival: float
    t_departure: float
    B: float
    B_max: float
    W_spent: float
    W_max: float
    energy: float

    @property
    def duration(self) -> float:
        return self.t_departure - self.t_arrival

    @property
    def price_defined(self) -> bool:
        return self.energy > 0

    @property
    def price(self) -> float:
        return self.W_spent / self.energy if self.energy > 0 else math.nan

    @property
    def W_rem(self) -> float:
        return self.W_max - self.W_spent

    def row(self) -> tuple:
        return (self.id, self.bus, self.strategy, self.reason.value, self.t_arrival, self.t_departure,
                self.B, self.B_max, self.W_spent, self.W_max, self.duration, self.energy,
                self.price, int(self.price_defined))


@dataclass(frozen=True)
class StepRecord:
    t: float
    connected: tuple[int, ...]
    status: str            # allocation status, or "Idle" when nothing was solved
    iterations: int
    v_sq: tuple[float, ...] | None   # bus order of the network


@dataclass(frozen=True)
class ArrivalRecord:
    id: int
    bus: int
    t_scheduled: float
    t_admitted: float
    strategy: str


@dataclass
class SimulationTrace:
    seed: int
    steps: list[StepRecord] = field(default_factory=list)
    rows: list[tuple] = field(default_factory=list)   # TRACE_COLUMNS per vehicle-step
    departures: list[DepartureRecord] = field(default_factory=list)
    arrivals: list[ArrivalRecord] = field(default_factory=list)
    censored: list[int] = field(default_factory=list)  # still connected at horizon end
    solves: int = 0
    cache_hits: int = 0

    def trace_csv(self) -> str:
        return _csv(TRACE_COLUMNS, self.rows)

    def departures_csv(self) -> str:
        return _csv(DEPARTURE_COLUMNS, [d.row() for d in self.departures])

    def summary(self) -> dict:
        reasons = {r.value: 0 for r in Departure if r is not Departure.STAY}
        for d in self.departures:
            reasons[d.reason.value] += 1
        return {"format": "pfcharge-run/1", "seed": self.seed, "steps": len(self.steps),
                "arrivals": len(self.arrivals), "departures": len(self.departures),
                "censored": len(self.censored), "reasons": reasons, "solves": self.solves,
                "cache_hits": self.cache_hits}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def sample_arrivals(rng: np.random.Generator, rate: float, window: float, start: float = 0.0) -> np.ndarray:
    """Arrival times of a Poisson process on ``(start, start + window]``."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if rate == 0 or window <= 0:
        return np.empty(0)
    times = []
    t = start
    end = start + window
    # draw gaps in chunks sized to the expected count
    chunk = max(16, int(rate * window * 1.2) + 16)
    while True:
        gaps = rng.exponential(1.0 / rate, size=chunk)
        cum = t + np.cumsum(gaps)
        inside = cum[cum <= end]
        times.append(inside)
        if len(inside) < chunk:
            break
        t = cum[-1]
    return np.concatenate(times)


def _poisson_schedule(config: SimulationConfig, rng: np.random.Generator) -> list[ScriptedArrival]:
    spec = config.poisson
    if spec is None:
        return []
    times = sample_arrivals(rng, spec.rate, config.horizon)
    buses = np.array(spec.buses if spec.buses else config.network.chargeable_buses)
    if spec.bus_policy == "uniform":
        picks = rng.integers(0, len(buses), size=len(times))
    else:
        p = np.asarray(spec.bus_weights, dtype=float)
        picks = rng.choice(len(buses), size=len(times), p=p / p.sum())
    return [ScriptedArrival(float(t), int(buses[k]), spec.template, spec.B0) for t, k in zip(times, picks)]


class Simulation:
    """Stateful runner; :func:`run` drives it to the horizon."""

    def __init__(self, config: SimulationConfig, record_rows: bool = True, record_voltages: bool = True,
                 cache_size: int = 4096):
        self.config = config
        self.record_rows = record_rows
        self.record_voltages = record_voltages
        rng = np.random.default_rng(config.seed)
        pending = list(config.scripted) + _poisson_schedule(config, rng)
        # stable: scripted before sampled at equal times
        self.pending = sorted(pending, key=lambda a: a.time)
        self.next_arrival = 0
        self.next_id = 0
        self.step_index = 0
        self.connected: list[tuple[VehicleState, VehicleParams]] = []
        self.trace = SimulationTrace(seed=config.seed)
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._admit(0.0)

    @property
    def t(self) -> float:
        return self.step_index * self.config.dt

    def _admit(self, hi: float):
        # everything scheduled up to ``hi`` not yet admitted joins at ``hi``
        while self.next_arrival < len(self.pending):
            a = self.pending[self.next_arrival]
            if a.time > hi:
                break
            state = VehicleState(id=self.next_id, bus=a.bus, T_arr=hi, B=a.B0)
            self.connected.append((state, a.params))
            self.trace.arrivals.append(ArrivalRecord(self.next_id, a.bus, a.time, hi, a.params.strategy.value))
            self.next_id += 1
            self.next_arrival += 1

    def _allocate(self, t: float, entries: list[tuple[int, int, float]]):
        key = tuple((bus, w) for _, bus, w in entries)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            self.trace.cache_hits += 1
            return hit
        cfg = self.config
        res = allocate(cfg.network, AllocationRequest.from_tuples(t, entries), cfg.v_nominal,
                       cfg.tol, cfg.max_iter, cfg.power_cap)
        self.trace.solves += 1
        if res.status is not Status.OPTIMAL:
            raise SimulationError(f"allocation {res.status.value} at step {self.step_index} (t={t})",
                                  self.step_index, t, res.status.value)
        powers = tuple(res.powers[vid] for vid, _, _ in entries)
        v_sq = tuple(res.v_sq[b.id] for b in cfg.network.buses)
        out = (powers, v_sq, res.iterations)
        self._cache[key] = out
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return out

    def step(self) -> None:
        cfg = self.config
        dt = cfg.dt
        t = self.t
        if self.step_index >= cfg.n_steps:
            raise SimulationError("step past the horizon", self.step_index, t)

        weights = [post_weight(state, params, t, dt) for state, params in self.connected]
        entries = [(state.id, state.bus, w) for (state, _), w in zip(self.connected, weights) if w > 0]
        powers = {}
        status, iters, v_sq = "Idle", 0, None
        if entries:
            p, v_sq, iters = self._allocate(t, entries)
            powers = {vid: pl for (vid, _, _), pl in zip(entries, p)}
            status = Status.OPTIMAL.value
        self.trace.steps.append(StepRecord(t, tuple(s.id for s, _ in self.connected), status, iters,
                                           v_sq if self.record_voltages else None))

        t_end = t + dt
        still = []
        for (state, params), w in zip(self.connected, weights):
            accrue(state, params, powers.get(state.id, 0.0), w, dt)
            if self.record_rows:
                self.trace.rows.append((t, state.id, state.bus, w, state.last_P, state.B, state.W_spent))
            # elapsed time uses the step index to avoid drift
            verdict = should_disconnect(state, params, (self.step_index + 1) * dt)
            if verdict is Departure.STAY:
                still.append((state, params))
            else:
                self.trace.departures.append(DepartureRecord(
                    state.id, state.bus, params.strategy.value, verdict, state.T_arr, t_end, state.B,
                    params.B_max, state.W_spent, params.W_max, state.energy))
        self.connected = still
        self.step_index += 1
        self._admit(self.t)

    def finish(self) -> SimulationTrace:
        self.trace.censored = [s.id for s, _ in self.connected]
        return self.trace


def run(config: SimulationConfig, record_rows: bool = True, record_voltages: bool = True) -> SimulationTrace:
    sim = Simulation(config, record_rows=record_rows, record_voltages=record_voltages)
    for _ in range(config.n_steps):
        try:
            sim.step()
        except SimulationError:
            raise
        except Exception as exc:   # attach the step index to anything unexpected
            raise SimulationError(f"step {sim.step_index} failed: {exc}", sim.step_index, sim.t) from exc
    return sim.finish()


def heterogeneous_budgets(n: int = 9, base: float = 500.0, growth: float = 1.3) -> list[float]:
    return [growth**k * base for k in range(n)]


def scenario_heterogeneous_aggressive(strategy, horizon: float = 500.0, dt: float = 1.0,
                                      kappa: float = 0.001, d: float = 0.75, w_min: float = 1e-3,
                                      v_nominal: float = 1.0, alpha: float = 0.1,
                                      tol: float = DEFAULT_TOL) -> SimulationConfig:
    """Star network, incumbents at buses 2..10, aggressive UT vehicle at bus 11 from t=100."""
    strategy = Strategy.parse(strategy)
    net = star_network(10, STAR_R, STAR_X, voltage_limits(v_nominal, alpha))
    scripted = []
    for bus, budget in zip(range(2, 11), heterogeneous_budgets()):
        params = VehicleParams(B_max=20.0, W_max=budget, T_max=300.0, strategy=strategy,
                               kappa=kappa, w_min=w_min, d=d)
        scripted.append(ScriptedArrival(0.0, bus, params))
    aggressive = VehicleParams(B_max=20.0, W_max=10_000_000.0, T_max=100.0, strategy=Strategy.UT,
                               kappa=kappa, w_min=w_min, d=d)
    scripted.append(ScriptedArrival(AGGRESSIVE_ARRIVAL, AGGRESSIVE_BUS, aggressive))
    return SimulationConfig(network=net, horizon=horizon, dt=dt, scripted=tuple(scripted),
                            v_nominal=v_nominal, tol=tol)


def check_invariants(trace: SimulationTrace, config: SimulationConfig, tol: float = 1e-6) -> list[str]:
    """Budget, battery, voltage and stay-length violations found in a trace."""
    problems = []
    spec = _params_by_id(trace, config)
    for t, vid, bus, w, P, B, W_spent in trace.rows:
        p = spec[vid]
        if W_spent > p.W_max * (1 + 1e-12):
            problems.append(f"t={t} vehicle {vid}: W_spent {W_spent} > W_max {p.W_max}")
        if w < 0 or P < 0:
            problems.append(f"t={t} vehicle {vid}: negative w or P")
        if not (-1e-12 <= B <= p.B_max):
            problems.append(f"t={t} vehicle {vid}: battery {B} outside [0, {p.B_max}]")
    # weight posted while the budget is exhausted must be zero
    spent = {}
    for t, vid, bus, w, P, B, W_spent in trace.rows:
        p = spec[vid]
        if p.W_max - spent.get(vid, 0.0) <= p.eps_budget and w != 0.0:
            problems.append(f"t={t} vehicle {vid}: posted {w} with no budget left")
        spent[vid] = W_spent
    net = config.network
    vmin = np.array([b.v_min**2 for b in net.buses]) - tol
    vmax = np.array([b.v_max**2 for b in net.buses]) + tol
    for s in trace.steps:
        if s.v_sq is not None:
            v = np.asarray(s.v_sq)
            if np.any(v < vmin) or np.any(v > vmax):
                problems.append(f"t={s.t}: squared voltage outside bounds")
    for d in trace.departures:
        p = spec[d.id]
        if d.duration > p.T_max + config.dt * (1 + 1e-9):
            problems.append(f"vehicle {d.id} stayed {d.duration} > T_max + dt")
        ok = {Departure.FULL_BATTERY: d.B >= p.B_max - p.eps_battery,
              Departure.BUDGET_SPENT: d.W_max - d.W_spent <= p.eps_budget,
              Departure.TIME_UP: d.duration >= p.T_max * (1 - 1e-12)}[d.reason]
        if not ok:
            problems.append(f"vehicle {d.id}: reason {d.reason.value} inconsistent with final state")
    return problems


def _params_by_id(trace: SimulationTrace, config: SimulationConfig) -> dict[int, VehicleParams]:
    # rebuild the admission order exactly as the simulation did
    rng = np.random.default_rng(config.seed)
    pending = sorted(list(config.scripted) + _poisson_schedule(config, rng), key=lambda a: a.time)
    return {a.id: pending[a.id].params for a in trace.arrivals}


def write_outputs(trace: SimulationTrace, out_dir, config: SimulationConfig | None = None,
                  extra: dict | None = None) -> dict[str, str]:
    """Write trace.csv, departures.csv and summary.json into ``out_dir``."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out / "trace.csv", "departures": out / "departures.csv", "summary": out / "summary.json"}
    paths["trace"].write_text(trace.trace_csv())
    paths["departures"].write_text(trace.departures_csv())
    summary = trace.summary()
    if config is not None:
        summary.update({"dt": config.dt, "horizon": config.horizon, "tol": config.tol})
    summary.update(extra or {})
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}
