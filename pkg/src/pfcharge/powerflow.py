"""Exact AC power flow on radial networks (backward/forward sweep).

Used as an independent check on the cone-program allocations: feeding the
allocated loads back through the physical power-flow equations must
reproduce the squared voltages returned by the optimizer.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .network import NetworkModel, build_network, Bus, Branch


class PowerFlowError(RuntimeError):
    """The sweep did not converge (load beyond the voltage-collapse point)."""


def radial_power_flow(network: NetworkModel, loads: Mapping[int, float], v_root: float = 1.0,
                      reactive: Mapping[int, float] | None = None,
                      tol: float = 1e-13, max_iter: int = 2000) -> dict[int, complex]:
    """Complex bus voltages for given active (and optional reactive) consumption.

    ``loads`` maps bus id to consumed active power; the root is held at
    ``v_root`` with zero angle.
    """
    order = network.bfs_order
    parent = network.parent
    idx = {b: k for k, b in enumerate(order)}
    n = len(order)
    s_load = np.zeros(n, dtype=complex)
    for bus, p in loads.items():
        s_load[idx[bus]] += p
    for bus, q in (reactive or {}).items():
        s_load[idx[bus]] += 1j * q
    par = np.full(n, -1)
    z = np.zeros(n, dtype=complex)
    for bus, (up, k) in parent.items():
        par[idx[bus]] = idx[up]
        br = network.branches[k]
        z[idx[bus]] = br.r + 1j * br.x

    v = np.full(n, complex(v_root))
    for _ in range(max_iter):
        current = np.conj(s_load / v)
        # reverse BFS: children before parents; branch current accumulates downstream loads
        for k in range(n - 1, 0, -1):
            if par[k] > 0:
                current[par[k]] += current[k]
        v_new = v.copy()
        for k in range(1, n):
            v_new[k] = v_new[par[k]] - z[k] * current[k]
        if not np.all(np.isfinite(v_new)) or np.any(np.abs(v_new) < 1e-6):
            raise PowerFlowError("sweep diverged")
        if np.max(np.abs(v_new - v)) < tol:
            return {b: complex(v_new[idx[b]]) for b in order}
        v = v_new
    raise PowerFlowError(f"sweep did not converge in {max_iter} iterations")


def two_bus_capacity(r: float, x: float, v_root: float = 1.0, v_min: float = 0.9,
                     rel_tol: float = 1e-14) -> float:
    """Largest active load at the far end of one line with ``|v|^2 >= v_min^2``.

    Brute force: bisection on the load, each trial solved with the exact
    AC sweep. Loads past the voltage-collapse point count as violating.
    """
    net = build_network([Bus(0, 0.5 * v_min, 2 * v_root, is_root=True, chargeable=False),
                         Bus(1, 0.5 * v_min, 2 * v_root)],
                        [Branch(0, 1, r, x)])

    def ok(p):
        try:
            v = radial_power_flow(net, {1: p}, v_root=v_root)[1]
        except PowerFlowError:
            return False
        return abs(v) ** 2 >= v_min**2

    lo, hi = 0.0, 1.0
    while ok(hi):
        lo, hi = hi, 2.0 * hi
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo
