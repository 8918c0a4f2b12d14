"""Weighted proportionally fair allocation over the relaxed optimal power flow.

Per time step the grid maximizes ``sum_l w_l log P_l`` over vehicle powers,
subject to active/reactive balance at every non-root bus, squared-voltage
bounds and one rotated second-order cone per branch linking the squared
voltages ``V_ii, V_jj`` with the branch product ``V_ij = v_i conj(v_j)``.
The root bus squared voltage is pinned to ``v_nominal**2``.

Variable layout of ``x``: ``[P (vehicles) | V_ii (buses) | Re V_ij | Im V_ij]``.
"""

from __future__ import annotations

import enum
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _conic
from .network import NetworkModel

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
RESTART_SCALES = (0.1, 1.0, 0.01)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    vehicle: int
    bus: int
    weight: float


@dataclass(frozen=True)
class AllocationRequest:
    t: float
    entries: tuple[Entry, ...]

    @classmethod
    def from_tuples(cls, t: float, entries: Sequence[tuple[int, int, float]]) -> "AllocationRequest":
        return cls(t, tuple(Entry(int(v), int(b), float(w)) for v, b, w in entries))


@dataclass
class AllocationProblem:
    network: NetworkModel
    request: AllocationRequest
    v_nominal: float
    vehicles: tuple[int, ...]          # ids with a P variable, in column order
    zero_weight: tuple[int, ...]       # carried, P fixed to 0
    weights: np.ndarray
    p_index: dict[int, int]
    v_index: dict[int, int]
    re_index: dict[tuple[int, int], int]
    im_index: dict[tuple[int, int], int]
    A: np.ndarray
    b: np.ndarray
    h: np.ndarray
    # G x + s = h in structured form: one nonzero per ray row, 4x4 blocks per cone
    ncol: np.ndarray
    ncoef: np.ndarray
    qcols: np.ndarray
    qM: np.ndarray
    dims: tuple[int, int, int]         # weighted rays, plain rays, 4-dim cones
    degenerate: bool = False
    idle: frozenset[int] = frozenset()     # buses pinned to their parent voltage
    cone_branches: tuple[tuple[int, int], ...] = ()   # branch of each cone, in order
    pattern: _conic.KKTPattern | None = field(default=None, repr=False)

    @property
    def G(self) -> np.ndarray:
        """Dense cone-row matrix (verification and export only)."""
        nn = len(self.ncol)
        G = np.zeros((nn + 4 * len(self.qcols), self.n_vars))
        G[np.arange(nn), self.ncol] = self.ncoef
        for k, cols in enumerate(self.qcols):
            G[nn + 4 * k:nn + 4 * k + 4, cols] = self.qM[k]
        return G

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def n_cones(self) -> int:
        return self.dims[2]


@dataclass
class AllocationResult:
    powers: dict[int, float]
    v_sq: dict[int, float]
    branch_vars: dict[tuple[int, int], tuple[float, float]]
    status: Status
    iterations: int
    objective: float
    # duals of the weight-normalized problem (weights scaled to sum one)
    y: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    z: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    degenerate: bool = False

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def idle_buses(network: NetworkModel, loaded: Sequence[int]) -> frozenset[int]:
    """Non-root buses with no load anywhere in their subtree."""
    busy = set()
    parent = network.parent
    for bus in loaded:
        while bus not in busy and bus != network.root:
            busy.add(bus)
            bus = parent[bus][0]
    return frozenset(b.id for b in network.buses if not b.is_root and b.id not in busy)


@lru_cache(maxsize=1024)
def _network_rows(network: NetworkModel, v_nominal: float, idle: frozenset[int] = frozenset()):
    """Equality rows and cone structure over the (V, Re, Im) block.

    Independent of the vehicles apart from ``idle``; columns are offset by
    the caller. An idle bus carries no flow in any physical solution, so
    instead of its balance rows and branch cone it gets ``V_j = V_i``,
    ``Re V_ij = V_i``, ``Im V_ij = 0`` against its parent ``i``. Left free,
    those variables form a non-strictly complementary face that interior
    points only approach at the square root of the gap.
    """
    nb = len(network.buses)
    ne = len(network.branches)
    nx = nb + 2 * ne
    bus_idx = network.bus_index
    nonroot = [bus.id for bus in network.buses if not bus.is_root]
    row_of = {bus: k for k, bus in enumerate(nonroot)}
    n_nr = len(nonroot)
    idle_list = [bus for bus in nonroot if bus in idle]

    # rows: root pin, active balance per non-root bus, reactive balance per
    # non-root bus, then one Im pin per idle bus
    A = np.zeros((1 + 2 * n_nr + len(idle_list), nx))
    b = np.zeros(A.shape[0])
    A[0, bus_idx[network.root]] = 1.0
    b[0] = v_nominal**2
    for k, br in enumerate(network.branches):
        cr, ci = nb + k, nb + ne + k
        # outflow from the 'from' end uses V_ft, from the 'to' end its conjugate
        for bus, sign in ((br.from_bus, 1.0), (br.to_bus, -1.0)):
            if bus not in row_of or bus in idle:
                continue
            ra = 1 + row_of[bus]
            rr = 1 + n_nr + row_of[bus]
            cv = bus_idx[bus]
            A[ra, cv] += br.g
            A[ra, cr] -= br.g
            A[ra, ci] += sign * br.b
            A[rr, cv] += br.b
            A[rr, cr] -= br.b
            A[rr, ci] -= sign * br.g
    for m, bus in enumerate(idle_list):
        up, k = network.parent[bus]
        ra = 1 + row_of[bus]
        rr = 1 + n_nr + row_of[bus]
        A[ra, bus_idx[bus]] = 1.0
        A[ra, bus_idx[up]] = -1.0
        A[rr, nb + k] = 1.0
        A[rr, bus_idx[up]] = -1.0
        A[1 + 2 * n_nr + m, nb + ne + k] = 1.0

    # voltage bounds on non-root buses: V - vmin^2 >= 0, vmax^2 - V >= 0
    vcol = np.array([bus_idx[bus] for bus in nonroot for _ in (0, 1)], dtype=np.int64)
    vcoef = np.tile([-1.0, 1.0], n_nr)
    vh = np.array([val for bus in nonroot
                   for val in (-network.bus(bus).v_min**2, network.bus(bus).v_max**2)])

    # (V_f + V_t, 2 Re, 2 Im, V_f - V_t) in Q^4 for every branch feeding a loaded bus
    idle_branches = {network.parent[bus][1] for bus in idle_list}
    qcols = np.array([[bus_idx[br.from_bus], bus_idx[br.to_bus], nb + k, nb + ne + k]
                      for k, br in enumerate(network.branches) if k not in idle_branches],
                     dtype=np.int64).reshape(-1, 4)
    return A, b, vcol, vcoef, vh, qcols, row_of


SOC_BLOCK = np.array([[-1.0, -1.0, 0.0, 0.0],
                      [0.0, 0.0, -2.0, 0.0],
                      [0.0, 0.0, 0.0, -2.0],
                      [-1.0, 1.0, 0.0, 0.0]])

_PATTERNS: OrderedDict = OrderedDict()


def _pattern(key, A, ncol, qcols) -> _conic.KKTPattern:
    pat = _PATTERNS.get(key)
    if pat is None:
        pat = _conic.kkt_pattern(A, ncol, qcols)
        _PATTERNS[key] = pat
        if len(_PATTERNS) > 512:
            _PATTERNS.popitem(last=False)
    else:
        _PATTERNS.move_to_end(key)
    return pat


def build_problem(network: NetworkModel, request: AllocationRequest, v_nominal: float = 1.0,
                  power_cap: float | None = None) -> AllocationProblem:
    """Assemble the cone program for one time step.

    ``power_cap`` optionally bounds every vehicle's power; it is off by
    default because the relaxation is only guaranteed exact without it.
    """
    chargeable = set(network.chargeable_buses)
    seen = set()
    for e in request.entries:
        if e.bus not in chargeable:
            raise AllocationError(f"vehicle {e.vehicle} at non-chargeable bus {e.bus}")
        if not (e.weight >= 0.0) or not math.isfinite(e.weight):
            raise AllocationError(f"vehicle {e.vehicle} has invalid weight {e.weight}")
        if e.vehicle in seen:
            raise AllocationError(f"duplicate vehicle id {e.vehicle}")
        seen.add(e.vehicle)

    positive = [e for e in request.entries if e.weight > 0.0]
    zero = tuple(e.vehicle for e in request.entries if e.weight == 0.0)
    idle = idle_buses(network, [e.bus for e in positive])
    An, bn, vcol, vcoef, vh, qcols, row_of = _network_rows(network, float(v_nominal), idle)
    nv = len(positive)
    nb = len(network.buses)
    ne = len(network.branches)
    n = nv + An.shape[1]

    A = np.zeros((An.shape[0], n))
    A[:, nv:] = An
    for j, e in enumerate(positive):
        A[1 + row_of[e.bus], j] = 1.0   # outflow + consumption = 0
    pcols = np.arange(nv, dtype=np.int64)
    ncol = [pcols]
    ncoef = [np.full(nv, -1.0)]
    h = [np.zeros(nv)]
    if power_cap is not None:
        ncol.append(pcols)
        ncoef.append(np.ones(nv))
        h.append(np.full(nv, float(power_cap)))
    ncol.append(vcol + nv)
    ncoef.append(vcoef)
    h.append(vh)
    h.append(np.zeros(4 * len(qcols)))
    ncol = np.concatenate(ncol)
    qcols = qcols + nv

    bus_ids = [bus.id for bus in network.buses]
    idle_branches = {network.parent[bus][1] for bus in idle}
    keys = [(br.from_bus, br.to_bus) for br in network.branches]
    problem = AllocationProblem(
        network=network, request=request, v_nominal=float(v_nominal),
        vehicles=tuple(e.vehicle for e in positive), zero_weight=zero,
        weights=np.array([e.weight for e in positive]),
        p_index={e.vehicle: j for j, e in enumerate(positive)},
        v_index={bus: nv + k for k, bus in enumerate(bus_ids)},
        re_index={key: nv + nb + k for k, key in enumerate(keys)},
        im_index={key: nv + nb + ne + k for k, key in enumerate(keys)},
        A=A, b=bn.copy(), h=np.concatenate(h),
        ncol=ncol, ncoef=np.concatenate(ncoef),
        qcols=qcols, qM=np.broadcast_to(SOC_BLOCK, (len(qcols), 4, 4)).copy(),
        dims=(nv, len(ncol) - nv, len(qcols)), idle=idle,
        cone_branches=tuple(key for k, key in enumerate(keys) if k not in idle_branches),
        degenerate=nv == 0,
    )
    if nv:
        key = (network, tuple(e.bus for e in positive), power_cap is not None)
        problem.pattern = _pattern(key, A, ncol, qcols)
    return problem


def _initial_point(problem: AllocationProblem, scale: float = 0.1):
    nw, nl, nq = problem.dims
    n = problem.n_vars
    vn2 = problem.v_nominal**2
    x = np.zeros(n)
    x[list(problem.v_index.values())] = vn2
    x[list(problem.re_index.values())] = vn2
    w = problem.weights / problem.weights.sum()
    # powers proportional to weights: equal pinned duals, the co-located optimum shape
    p0 = scale * w
    x[:nw] = p0
    s = np.empty(len(problem.h))
    _conic.g_matvec(x, problem.ncol, problem.ncoef, problem.qcols, problem.qM, s)
    s = problem.h - s
    s[:nw] = p0
    s[nw:nw + nl] = np.maximum(s[nw:nw + nl], 0.1)
    o = nw + nl
    s[o:] = np.tile([2.0 * vn2, 0.0, 0.0, 0.0], nq)
    z = np.empty_like(s)
    z[:nw] = w / p0
    z[nw:o] = 1.0 / s[nw:o]
    z[o:] = np.tile([1.0 / (2.0 * vn2), 0.0, 0.0, 0.0], nq)
    y = np.zeros(problem.A.shape[0])
    return x, y, z, s, w


def _degenerate_result(problem: AllocationProblem) -> AllocationResult:
    vn2 = problem.v_nominal**2
    net = problem.network
    return AllocationResult(
        powers={e.vehicle: 0.0 for e in problem.request.entries},
        v_sq={bus.id: vn2 for bus in net.buses},
        branch_vars={(br.from_bus, br.to_bus): (vn2, 0.0) for br in net.branches},
        status=Status.OPTIMAL, iterations=0, objective=0.0, degenerate=True,
    )


@lru_cache(maxsize=64)
def _voltage_feasible(network: NetworkModel, v_nominal: float) -> bool:
    root = network.bus(network.root)
    # pure loads can only lower voltages below the root value
    return root.v_min <= v_nominal <= root.v_max and all(bus.v_min <= v_nominal for bus in network.buses)


def solve(problem: AllocationProblem, tol: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER) -> AllocationResult:
    """Solve one allocation problem.

    Infeasible or non-converged solves are reported through ``status``;
    their powers are whatever the last iterate held and must not be used.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if problem.degenerate:
        return _degenerate_result(problem)
    if not _voltage_feasible(problem.network, problem.v_nominal):
        return _finish(problem, *_initial_point(problem)[:3], Status.INFEASIBLE, 0)

    pat = problem.pattern
    total = 0
    # a failed run is retried from a larger power scale; high-capacity buses start closer
    for scale in RESTART_SCALES:
        x, y, z, s, w = _initial_point(problem, scale)
        code, iters = _conic.solve_cone_program(
            problem.A, problem.b, problem.h, problem.ncol, problem.ncoef, problem.qcols,
            problem.qM, problem.dims[0], w, x, y, z, s, float(tol), int(max_iter),
            pat.Ap, pat.Ai, pat.src, pat.diag, pat.Lp, pat.parent, pat.perm, pat.sign)
        total += iters
        if code in (_conic.OPTIMAL, _conic.INFEASIBLE):
            break
    iters = total
    status = {_conic.OPTIMAL: Status.OPTIMAL, _conic.INFEASIBLE: Status.INFEASIBLE}.get(
        code, Status.NUMERICAL_FAILURE)
    return _finish(problem, x, y, z, status, iters)


def _finish(problem, x, y, z, status, iters) -> AllocationResult:
    nw = problem.dims[0]
    powers = {vid: float(x[j]) for vid, j in problem.p_index.items()}
    if status is Status.OPTIMAL:
        # exact values: the pinned block gives P_l = w_l / z_l to full relative accuracy
        w = problem.weights / problem.weights.sum()
        for vid, j in problem.p_index.items():
            powers[vid] = float(w[j] / z[j])
    for vid in problem.zero_weight:
        powers[vid] = 0.0
    v_sq = {bus: float(x[col]) for bus, col in problem.v_index.items()}
    branch_vars = {key: (float(x[col]), float(x[problem.im_index[key]]))
                   for key, col in problem.re_index.items()}
    pos = np.array([powers[v] for v in problem.vehicles])
    with np.errstate(divide="ignore", invalid="ignore"):
        objective = float(np.sum(problem.weights * np.log(pos))) if nw else 0.0
    return AllocationResult(powers=powers, v_sq=v_sq, branch_vars=branch_vars, status=status,
                            iterations=int(iters), objective=objective,
                            y=y.copy(), z=z[nw:].copy())


def allocate(network: NetworkModel, request: AllocationRequest, v_nominal: float = 1.0,
             tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
             power_cap: float | None = None) -> AllocationResult:
    return solve(build_problem(network, request, v_nominal, power_cap), tol, max_iter)


# -- verification ------------------------------------------------------------

@dataclass
class ExactnessReport:
    gaps: dict[tuple[int, int], float]
    tol: float

    @property
    def max_gap(self) -> float:
        return max(self.gaps.values(), default=0.0)

    @property
    def exact(self) -> bool:
        return self.max_gap <= self.tol


def cone_gap(v_ii: float, v_jj: float, re: float, im: float) -> float:
    return (v_ii + v_jj) - math.sqrt((2 * re) ** 2 + (2 * im) ** 2 + (v_ii - v_jj) ** 2)


def check_exactness(result: AllocationResult, network: NetworkModel, tol: float = 1e-6) -> ExactnessReport:
    gaps = {}
    for br in network.branches:
        key = (br.from_bus, br.to_bus)
        re, im = result.branch_vars[key]
        gaps[key] = cone_gap(result.v_sq[br.from_bus], result.v_sq[br.to_bus], re, im)
    return ExactnessReport(gaps=gaps, tol=tol)


@dataclass
class KKTReport:
    stationarity: float = math.nan
    primal: float = math.nan
    dual: float = math.nan
    complementarity: float = math.nan
    skipped: str | None = None

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def within(self, tol: float) -> bool:
        return self.skipped is None and self.max() <= tol


def _soc_violation(u: np.ndarray) -> float:
    cones = u.reshape(-1, 4)
    if cones.size == 0:
        return 0.0
    return float(max(0.0, np.max(np.linalg.norm(cones[:, 1:], axis=1) - cones[:, 0])))


def kkt_residuals(problem: AllocationProblem, result: AllocationResult) -> KKTReport:
    """Residuals of the optimality conditions, recomputed from the result maps.

    Reported for the weight-normalized problem (weights scaled to sum one),
    so values are comparable across instances.
    """
    if problem.degenerate or result.degenerate:
        return KKTReport(skipped="degenerate: no positive weights, nothing was solved")
    if result.status is not Status.OPTIMAL:
        return KKTReport(skipped=f"status {result.status.value}")
    nw, nl, nq = problem.dims
    x = np.zeros(problem.n_vars)
    for vid, col in problem.p_index.items():
        x[col] = result.powers[vid]
    for bus, col in problem.v_index.items():
        x[col] = result.v_sq[bus]
    for key, col in problem.re_index.items():
        x[col], x[problem.im_index[key]] = result.branch_vars[key]
    w = problem.weights / problem.weights.sum()
    P = x[:nw]
    y, z = result.y, result.z
    G_rest, h_rest = problem.G[nw:], problem.h[nw:]

    grad = problem.A.T @ y + G_rest.T @ z
    with np.errstate(divide="ignore"):
        grad[:nw] -= w / P
    s = h_rest - G_rest @ x
    primal = max(float(np.max(np.abs(problem.A @ x - problem.b))),
                 float(max(0.0, -np.min(s[:nl]))) if nl else 0.0,
                 _soc_violation(s[nl:]),
                 float(max(0.0, -np.min(P))))
    dual = max(float(max(0.0, -np.min(z[:nl]))) if nl else 0.0, _soc_violation(z[nl:]))
    return KKTReport(stationarity=float(np.max(np.abs(grad))), primal=primal, dual=dual,
                     complementarity=float(abs(s @ z)))


def dump_problem(problem: AllocationProblem, path: str | os.PathLike) -> None:
    """Write the instance as JSON (variables, rows, cones) for external solvers."""
    names = [""] * problem.n_vars
    for vid, c in problem.p_index.items():
        names[c] = f"P[{vid}]"
    for bus, c in problem.v_index.items():
        names[c] = f"V[{bus},{bus}]"
    for (f, t), c in problem.re_index.items():
        names[c] = f"ReV[{f},{t}]"
        names[problem.im_index[(f, t)]] = f"ImV[{f},{t}]"
    nw, nl, nq = problem.dims
    doc = {
        "format": "pfcharge-problem/1",
        "objective": {"maximize": "sum w log P", "weights": dict(zip(map(str, problem.vehicles),
                                                                      problem.weights.tolist()))},
        "variables": names,
        "equalities": {"A": problem.A.tolist(), "b": problem.b.tolist()},
        "cone_rows": {"G": problem.G.tolist(), "h": problem.h.tolist(),
                      "note": "G x + s = h, s in cones"},
        "cones": [{"type": "nonneg", "dim": nw, "role": "powers"},
                  {"type": "nonneg", "dim": nl, "role": "voltage bounds"}]
                 + [{"type": "soc", "dim": 4, "branch": list(k)} for k in problem.cone_branches],
        "idle_buses": sorted(problem.idle),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
