"""Departure statistics, replicated arrival-rate sweeps and table export."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .config import ConfigError, config_from_dict, config_to_dict, load_json, SWEEP_FORMAT
from .simulator import DepartureRecord, SimulationConfig, SimulationError, SimulationTrace, check_invariants, run
from .strategies import Departure, Strategy

METRICS = (
    "battery_at_departure",   # mean B at departure
    "fraction_full",          # share of departures with a full battery
    "remaining_budget",       # mean W_max - W_spent at departure
    "count_time_up",          # departures for TimeUp
    "price",                  # mean W_spent / energy over vehicles that received energy
    "connected_time",         # mean stay length
)
FULL_REL_EPS = 1e-6           # same threshold as the FullBattery test
SUMMARY_FORMAT = "pfcharge-summary/1"
FORMATS = ("csv", "json")


@dataclass(frozen=True)
class RunSummary:
    values: dict[str, float]
    departures: int
    priced: int
    censored: int = 0

    @property
    def empty(self) -> bool:
        return self.departures == 0


def summarize(departures: Sequence[DepartureRecord], censored: int = 0) -> RunSummary:
    """The six per-run metrics. An empty list gives an all-NaN summary with ``empty`` set."""
    if not departures:
        return RunSummary({m: math.nan for m in METRICS}, 0, 0, censored)
    B = np.array([d.B for d in departures])
    B_max = np.array([d.B_max for d in departures])
    priced = [d.price for d in departures if d.price_defined]
    values = {
        "battery_at_departure": float(B.mean()),
        "fraction_full": float(np.mean(B >= B_max * (1.0 - FULL_REL_EPS))),
        "remaining_budget": float(np.mean([d.W_rem for d in departures])),
        "count_time_up": float(sum(d.reason is Departure.TIME_UP for d in departures)),
        "price": float(np.mean(priced)) if priced else math.nan,
        "connected_time": float(np.mean([d.duration for d in departures])),
    }
    return RunSummary(values, len(departures), len(priced), censored)


@dataclass(frozen=True)
class SweepSpec:
    rates: tuple[float, ...]
    base: SimulationConfig
    replications: int = 20
    strategy: Strategy | None = None     # overrides the Poisson template strategy
    master_seed: int = 0
    check: bool = True                   # run the trace invariant checks in every replication

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if not rates:
            raise ValueError("sweep needs at least one rate")
        if any(not (r > 0 and math.isfinite(r)) for r in rates):
            raise ValueError(f"rates must be positive, got {rates}")
        if len(set(rates)) != len(rates):
            raise ValueError(f"duplicate rates in {rates}")
        if list(rates) != sorted(rates):
            raise ValueError(f"rates must be sorted ascending, got {rates}")
        if self.replications < 2:
            raise ValueError("at least two replications are needed for a confidence interval")
        if self.base.poisson is None:
            raise ValueError("sweep base config needs a poisson arrival block")
        if self.strategy is not None:
            object.__setattr__(self, "strategy", Strategy.parse(self.strategy))

    def run_seed(self, rate_index: int, rep: int) -> int:
        # independent of execution order and job count
        ss = np.random.SeedSequence(self.master_seed, spawn_key=(rate_index, rep))
        return int(ss.generate_state(1, np.uint32)[0])

    def config_for(self, rate_index: int, rep: int) -> SimulationConfig:
        p = self.base.poisson
        template = p.template if self.strategy is None else p.template.with_strategy(self.strategy)
        poisson = replace(p, rate=self.rates[rate_index], template=template)
        return replace(self.base, poisson=poisson, seed=self.run_seed(rate_index, rep))


@dataclass(frozen=True)
class MetricStat:
    mean: float
    half_width: float
    n: int

    @property
    def low(self) -> float:
        return self.mean - self.half_width

    @property
    def high(self) -> float:
        return self.mean + self.half_width


def mean_ci(values: Sequence[float], level: float = 0.95) -> MetricStat:
    """Student-t interval over replication values; NaNs are dropped."""
    x = np.asarray([v for v in values if math.isfinite(v)], dtype=float)
    n = len(x)
    if n == 0:
        return MetricStat(math.nan, math.nan, 0)
    if n == 1:
        return MetricStat(float(x[0]), math.nan, 1)
    q = stats.t.ppf(0.5 + level / 2, n - 1)
    return MetricStat(float(x.mean()), float(q * x.std(ddof=1) / math.sqrt(n)), n)


@dataclass
class StatRow:
    rate: float
    runs: int
    failed: int
    metrics: dict[str, MetricStat]


@dataclass
class StatSummary:
    rows: list[StatRow]
    strategy: str | None = None
    master_seed: int | None = None
    replications: int | None = None
    failures: list[dict] = field(default_factory=list)
    violations: list[dict] = field(default_factory=list)

    def column(self, metric: str) -> list[MetricStat]:
        return [r.metrics[metric] for r in self.rows]

    def table(self) -> list[dict]:
        out = []
        for r in self.rows:
            row = {"rate": r.rate, "runs": r.runs, "failed": r.failed}
            for m in METRICS:
                s = r.metrics[m]
                row[f"{m}_mean"], row[f"{m}_ci"], row[f"{m}_n"] = s.mean, s.half_width, s.n
            out.append(row)
        return out


def aggregate(rate: float, summaries: Sequence[RunSummary], failed: int = 0) -> StatRow:
    ok = [s for s in summaries if not s.empty]
    return StatRow(rate, len(summaries), failed,
                   {m: mean_ci([s.values[m] for s in ok]) for m in METRICS})


@dataclass(frozen=True)
class RunOutcome:
    rate_index: int
    rep: int
    seed: int
    summary: RunSummary | None
    error: dict | None = None
    violations: tuple[str, ...] = ()


def _run_one(args) -> RunOutcome:
    spec, k, rep = args
    config = spec.config_for(k, rep)
    try:
        trace = run(config, record_rows=spec.check, record_voltages=spec.check)
    except SimulationError as exc:
        return RunOutcome(k, rep, config.seed, None, exc.to_dict())
    bad = tuple(check_invariants(trace, config)) if spec.check else ()
    return RunOutcome(k, rep, config.seed, summarize(trace.departures, len(trace.censored)), None, bad)


def run_sweep(spec: SweepSpec, jobs: int = 1) -> list[RunOutcome]:
    tasks = [(spec, k, rep) for k in range(len(spec.rates)) for rep in range(spec.replications)]
    if jobs <= 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, tasks, chunksize=1))


def sweep(spec: SweepSpec, jobs: int = 1) -> StatSummary:
    """Replicated runs per rate, aggregated with 95% Student-t intervals.

    Failed runs are listed with their seed and excluded from the statistics.
    """
    outcomes = run_sweep(spec, jobs)
    rows, failures, violations = [], [], []
    for k, rate in enumerate(spec.rates):
        mine = [o for o in outcomes if o.rate_index == k]
        bad = [o for o in mine if o.summary is None]
        failures += [{"rate": rate, "replication": o.rep, "seed": o.seed, **o.error} for o in bad]
        violations += [{"rate": rate, "replication": o.rep, "seed": o.seed, "violation": v}
                       for o in mine for v in o.violations]
        rows.append(aggregate(rate, [o.summary for o in mine if o.summary is not None], len(bad)))
    strategy = spec.strategy.value if spec.strategy else spec.base.poisson.template.strategy.value
    return StatSummary(rows, strategy, spec.master_seed, spec.replications, failures, violations)


def trend_violations(summary: StatSummary, metric: str = "battery_at_departure") -> list[tuple[float, float]]:
    """Adjacent rate pairs where ``metric`` increases and the intervals do not overlap."""
    out = []
    for a, b in zip(summary.rows, summary.rows[1:]):
        sa, sb = a.metrics[metric], b.metrics[metric]
        if sb.mean > sa.mean and sb.low > sa.high:
            out.append((a.rate, b.rate))
    return out


# -- sweep files -------------------------------------------------------------

def sweep_from_dict(doc: dict, base_dir=None) -> SweepSpec:
    if doc.get("format") != SWEEP_FORMAT:
        raise ConfigError(f"expected format {SWEEP_FORMAT!r}, got {doc.get('format')!r}")
    try:
        scenario = doc["scenario"]
        if isinstance(scenario, str):
            path = Path(scenario)
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            scenario, scen_dir = load_json(path), path.parent
        else:
            scen_dir = base_dir
        base = config_from_dict(scenario, scen_dir)
        return SweepSpec(rates=tuple(doc["rates"]), base=base,
                         replications=int(doc.get("replications", 20)),
                         strategy=doc.get("strategy"), master_seed=int(doc.get("master_seed", 0)))
    except KeyError as exc:
        raise ConfigError(f"missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def sweep_to_dict(spec: SweepSpec) -> dict:
    return {"format": SWEEP_FORMAT, "rates": list(spec.rates), "replications": spec.replications,
            "strategy": None if spec.strategy is None else spec.strategy.value,
            "master_seed": spec.master_seed, "scenario": config_to_dict(spec.base)}


def load_sweep(path) -> SweepSpec:
    try:
        return sweep_from_dict(load_json(path), Path(path).parent)
    except ConfigError as exc:
        raise ConfigError(str(exc), path) from None


# -- export ------------------------------------------------------------------

def summary_columns() -> list[str]:
    cols = ["rate", "runs", "failed"]
    for m in METRICS:
        cols += [f"{m}_mean", f"{m}_ci", f"{m}_n"]
    return cols


def _num(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def summary_csv(summary: StatSummary) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = summary_columns()
    writer.writerow(cols)
    for row in summary.table():
        writer.writerow([_num(row[c]) for c in cols])
    return buf.getvalue()


def _json_safe(v):
    # NaN is not valid JSON; write null
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def summary_json(summary: StatSummary) -> str:
    doc = {"format": SUMMARY_FORMAT, "strategy": summary.strategy, "master_seed": summary.master_seed,
           "replications": summary.replications, "metrics": list(METRICS),
           "rows": [{k: _json_safe(v) for k, v in row.items()} for row in summary.table()],
           "failures": summary.failures, "violations": summary.violations}
    return json.dumps(doc, indent=2) + "\n"


def _row_from_table(row: dict) -> StatRow:
    def f(v):
        return math.nan if v is None else float(v)
    metrics = {m: MetricStat(f(row[f"{m}_mean"]), f(row[f"{m}_ci"]), int(row[f"{m}_n"])) for m in METRICS}
    return StatRow(float(row["rate"]), int(row["runs"]), int(row["failed"]), metrics)


def parse_summary_csv(text: str) -> StatSummary:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != summary_columns():
        raise ValueError("unexpected summary columns")
    return StatSummary([_row_from_table(r) for r in reader])


def parse_summary_json(text: str) -> StatSummary:
    doc = json.loads(text)
    if doc.get("format") != SUMMARY_FORMAT:
        raise ValueError(f"expected format {SUMMARY_FORMAT!r}")
    return StatSummary([_row_from_table(r) for r in doc["rows"]], doc.get("strategy"),
                       doc.get("master_seed"), doc.get("replications"),
                       doc.get("failures", []), doc.get("violations", []))


def export(obj: StatSummary | SimulationTrace, fmt: str, path: str | os.PathLike) -> Path:
    """Write a sweep summary or a run trace as CSV or JSON.

    A trace exports its per-step rows as CSV and its run summary as JSON.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown export format {fmt!r}; expected one of {FORMATS}")
    if isinstance(obj, StatSummary):
        text = summary_csv(obj) if fmt == "csv" else summary_json(obj)
    elif isinstance(obj, SimulationTrace):
        text = obj.trace_csv() if fmt == "csv" else json.dumps(obj.summary(), indent=2) + "\n"
    else:
        raise TypeError(f"cannot export {type(obj).__name__}")
    p = Path(path)
    try:
        p.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {p}: {exc.strerror}") from exc
    return p


def load_summary(path: str | os.PathLike, fmt: str | None = None) -> StatSummary:
    p = Path(path)
    fmt = fmt or p.suffix.lstrip(".")
    if fmt not in FORMATS:
        raise ValueError(f"unknown export format {fmt!r}; expected one of {FORMATS}")
    text = p.read_text(encoding="utf-8")
    return parse_summary_csv(text) if fmt == "csv" else parse_summary_json(text)
