"""Solver verification on a given network.

Each case is solved and checked three ways: KKT residuals, cone exactness
gaps, and agreement of the returned squared voltages with an exact AC power
flow driven by the allocated loads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .allocation import AllocationRequest, Status, build_problem, check_exactness, kkt_residuals, solve
from .network import NetworkError, NetworkModel
from .powerflow import PowerFlowError, radial_power_flow


@dataclass
class CaseReport:
    name: str
    status: str
    iterations: int
    kkt: float
    max_gap: float
    powerflow_error: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def powerflow_mismatch(network: NetworkModel, powers: dict[int, float], buses: dict[int, int],
                       v_sq: dict[int, float], v_nominal: float = 1.0) -> float:
    """Largest ``| |v|^2 - V_ii |`` between the exact flow and the optimizer's voltages."""
    loads: dict[int, float] = {}
    for vid, p in powers.items():
        loads[buses[vid]] = loads.get(buses[vid], 0.0) + p
    try:
        v = radial_power_flow(network, loads, v_root=v_nominal)
    except PowerFlowError:
        return float("inf")
    return max(abs(abs(v[b]) ** 2 - v_sq[b]) for b in v)


def verify_case(network: NetworkModel, name: str, entries, tol: float = 1e-8,
                check_tol: float = 1e-6, v_nominal: float = 1.0) -> CaseReport:
    problem = build_problem(network, AllocationRequest.from_tuples(0.0, entries), v_nominal)
    result = solve(problem, tol)
    if result.status is not Status.OPTIMAL:
        return CaseReport(name, result.status.value, result.iterations, np.nan, np.nan, np.nan, False)
    kkt = kkt_residuals(problem, result).max()
    gap = check_exactness(result, network, check_tol).max_gap
    buses = {vid: bus for vid, bus, _ in entries}
    pf = powerflow_mismatch(network, result.powers, buses, result.v_sq, v_nominal)
    ok = kkt <= check_tol and gap <= check_tol and pf <= check_tol
    return CaseReport(name, result.status.value, result.iterations, kkt, gap, pf, ok)


def verify_network(network: NetworkModel, tol: float = 1e-8, check_tol: float = 1e-6,
                   seed: int = 0, random_cases: int = 5, v_nominal: float = 1.0) -> list[CaseReport]:
    """Single vehicle per chargeable bus, one vehicle everywhere, and random weighted loads."""
    buses = network.chargeable_buses
    if not buses:
        raise NetworkError("network has no chargeable buses to verify")
    reports = [verify_case(network, f"single@{b}", [(0, b, 1.0)], tol, check_tol, v_nominal)
               for b in buses]
    reports.append(verify_case(network, "all-equal", [(k, b, 1.0) for k, b in enumerate(buses)],
                               tol, check_tol, v_nominal))
    rng = np.random.default_rng(seed)
    for c in range(random_cases):
        n = int(rng.integers(1, 2 * len(buses) + 1))
        at = rng.choice(buses, size=n)
        w = 10.0 ** rng.uniform(-1, 1, size=n)
        reports.append(verify_case(network, f"random-{c}",
                                   [(k, int(b), float(x)) for k, (b, x) in enumerate(zip(at, w))],
                                   tol, check_tol, v_nominal))
    return reports
