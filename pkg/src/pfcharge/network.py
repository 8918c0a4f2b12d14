"""Radial distribution networks: buses, branches, admittances and file I/O.

All electrical quantities are per-unit on a nominal voltage base of 1.0.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

FILE_HEADER = "pfcharge-network"
FILE_VERSION = 1


class NetworkError(ValueError):
    """Raised when a network description is not a valid radial tree."""


class NetworkFileError(NetworkError):
    """Parse failure in a network file; carries line and field diagnostics."""

    def __init__(self, message: str, path=None, line: int | None = None, column: str | None = None):
        self.path = path
        self.line = line
        self.column = column
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"field '{column}'")
        prefix = ":".join(loc[:2]) + (f" ({loc[2]})" if len(loc) > 2 else "")
        super().__init__(f"{prefix}: {message}" if prefix else message)


def admittance(r: float, x: float) -> tuple[float, float]:
    """Series admittance of a line with impedance ``r + jx``.

    Returns ``(g, b)`` with ``1 / (r + jx) = g - jb``, so ``b`` is the
    susceptance magnitude and both values are non-negative.
    """
    if r < 0 or x < 0:
        raise NetworkError(f"negative impedance r={r}, x={x}")
    z2 = r * r + x * x
    if z2 == 0.0:
        raise NetworkError("zero-impedance branch")
    return r / z2, x / z2


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float = 0.9
    v_max: float = 1.1
    is_root: bool = False
    chargeable: bool = True

    def __post_init__(self):
        if not (0.0 < self.v_min <= self.v_max):
            raise NetworkError(f"bus {self.id}: need 0 < v_min <= v_max, got {self.v_min}, {self.v_max}")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    g: float = field(init=False)
    b: float = field(init=False)

    def __post_init__(self):
        g, b = admittance(self.r, self.x)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class NetworkModel:
    """Validated radial network. Immutable; derived arrays are cached."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    root: int

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {bus.id: k for k, bus in enumerate(self.buses)}

    @cached_property
    def chargeable_buses(self) -> tuple[int, ...]:
        return tuple(bus.id for bus in self.buses if bus.chargeable and not bus.is_root)

    @cached_property
    def parent(self) -> dict[int, tuple[int, int]]:
        """Map bus id -> (parent bus id, branch index) for every non-root bus."""
        adj = _adjacency(self.buses, self.branches)
        parent: dict[int, tuple[int, int]] = {}
        seen = {self.root}
        queue = deque([self.root])
        while queue:
            u = queue.popleft()
            for v, k in adj[u]:
                if v not in seen:
                    seen.add(v)
                    parent[v] = (u, k)
                    queue.append(v)
        return parent

    @cached_property
    def bfs_order(self) -> tuple[int, ...]:
        """Bus ids in breadth-first order from the root."""
        order = [self.root]
        children = self.children
        i = 0
        while i < len(order):
            order.extend(children[order[i]])
            i += 1
        return tuple(order)

    @cached_property
    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {bus.id: [] for bus in self.buses}
        for v, (u, _) in self.parent.items():
            out[u].append(v)
        return out

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    @property
    def v_min_sq(self) -> np.ndarray:
        return np.array([bus.v_min**2 for bus in self.buses])

    @property
    def v_max_sq(self) -> np.ndarray:
        return np.array([bus.v_max**2 for bus in self.buses])

    def __len__(self):
        return len(self.buses)


def _adjacency(buses: Sequence[Bus], branches: Sequence[Branch]):
    adj: dict[int, list[tuple[int, int]]] = {bus.id: [] for bus in buses}
    for k, br in enumerate(branches):
        adj[br.from_bus].append((br.to_bus, k))
        adj[br.to_bus].append((br.from_bus, k))
    return adj


def build_network(buses: Iterable[Bus], branches: Iterable[Branch]) -> NetworkModel:
    buses = tuple(buses)
    branches = tuple(branches)
    ids = [bus.id for bus in buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise NetworkError(f"duplicate bus ids: {dup}")
    roots = [bus.id for bus in buses if bus.is_root]
    if len(roots) != 1:
        raise NetworkError(f"expected exactly one root bus, found {len(roots)}")
    known = set(ids)
    for br in branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise NetworkError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise NetworkError(f"self-loop at bus {br.from_bus}")
    if len(branches) != len(buses) - 1:
        # a connected graph with n nodes and n-1 edges is a tree
        if len(branches) >= len(buses):
            raise NetworkError("cycle detected: a radial network needs exactly |buses| - 1 branches")
        raise NetworkError("disconnected graph: too few branches for a tree")

    adj = _adjacency(buses, branches)
    seen = {roots[0]}
    queue = deque([roots[0]])
    while queue:
        u = queue.popleft()
        for v, _ in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    if len(seen) != len(buses):
        # n-1 edges but not connected implies a cycle somewhere
        raise NetworkError(f"disconnected graph (cycle elsewhere): unreachable buses {sorted(known - seen)}")
    return NetworkModel(buses=buses, branches=branches, root=roots[0])


def voltage_limits(v_nominal: float = 1.0, alpha: float = 0.1) -> tuple[float, float]:
    """Symmetric voltage band ``v_nominal * (1 -/+ alpha)``."""
    return v_nominal * (1.0 - alpha), v_nominal * (1.0 + alpha)


def star_network(n_leaves: int, r: float = 0.1, x: float = 0.6,
                 v_limits: tuple[float, float] = (0.9, 1.1)) -> NetworkModel:
    """Root 0 feeding hub 1, which feeds leaves ``2 .. n_leaves + 1``.

    Only the leaves are chargeable, so every vehicle competes for the
    root-hub line.
    """
    if n_leaves < 1:
        raise NetworkError("star network needs at least one leaf")
    v_min, v_max = v_limits
    buses = [Bus(0, v_min, v_max, is_root=True, chargeable=False),
             Bus(1, v_min, v_max, chargeable=False)]
    buses += [Bus(k, v_min, v_max) for k in range(2, n_leaves + 2)]
    branches = [Branch(0, 1, r, x)] + [Branch(1, k, r, x) for k in range(2, n_leaves + 2)]
    return build_network(buses, branches)


def line_network(n_buses: int, r: float = 0.1, x: float = 0.6,
                 v_limits: tuple[float, float] = (0.9, 1.1)) -> NetworkModel:
    """Chain ``0 - 1 - ... - n_buses-1`` with root 0; every other bus chargeable."""
    if n_buses < 2:
        raise NetworkError("line network needs at least two buses")
    v_min, v_max = v_limits
    buses = [Bus(0, v_min, v_max, is_root=True, chargeable=False)]
    buses += [Bus(k, v_min, v_max) for k in range(1, n_buses)]
    branches = [Branch(k - 1, k, r, x) for k in range(1, n_buses)]
    return build_network(buses, branches)


def random_tree(rng: np.random.Generator, n_buses: int,
                r_range=(0.01, 0.2), x_range=(0.01, 0.6),
                v_limits=(0.9, 1.1)) -> NetworkModel:
    """Random radial network: bus k attaches to a uniformly chosen earlier bus."""
    v_min, v_max = v_limits
    buses = [Bus(0, v_min, v_max, is_root=True, chargeable=False)]
    buses += [Bus(k, v_min, v_max) for k in range(1, n_buses)]
    branches = []
    for k in range(1, n_buses):
        parent = int(rng.integers(0, k))
        branches.append(Branch(parent, k, float(rng.uniform(*r_range)), float(rng.uniform(*x_range))))
    return build_network(buses, branches)


# -- file format -------------------------------------------------------------

BUS_FIELDS = ("id", "v_min", "v_max", "root", "chargeable")
BRANCH_FIELDS = ("from", "to", "r", "x")


def _parse_field(raw: str, kind, path, lineno, name):
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise NetworkFileError(f"cannot parse {raw!r} as {kind.__name__}", path, lineno, name) from None


def parse_network(text: str, path=None) -> NetworkModel:
    """Parse the tabular network format (see README for the layout)."""
    lines = text.splitlines()
    header_seen = False
    section = None
    buses: list[Bus] = []
    branches: list[Branch] = []
    for lineno, line in enumerate(lines, start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if not header_seen:
            parts = content.split()
            if len(parts) != 2 or parts[0] != FILE_HEADER:
                raise NetworkFileError(f"missing header line '{FILE_HEADER} {FILE_VERSION}'", path, lineno)
            if parts[1] != str(FILE_VERSION):
                raise NetworkFileError(f"unsupported format version {parts[1]}", path, lineno)
            header_seen = True
            continue
        if content.startswith("[") and content.endswith("]"):
            section = content[1:-1].strip()
            if section not in ("buses", "branches"):
                raise NetworkFileError(f"unknown section [{section}]", path, lineno)
            continue
        cols = content.split()
        if section == "buses":
            if len(cols) != len(BUS_FIELDS):
                raise NetworkFileError(f"expected {len(BUS_FIELDS)} fields {BUS_FIELDS}, got {len(cols)}", path, lineno)
            kinds = (int, float, float, bool, bool)
            vals = [_parse_field(c, k, path, lineno, n) for c, k, n in zip(cols, kinds, BUS_FIELDS)]
            try:
                buses.append(Bus(vals[0], vals[1], vals[2], is_root=vals[3], chargeable=vals[4] and not vals[3]))
            except NetworkError as exc:
                raise NetworkFileError(str(exc), path, lineno) from None
        elif section == "branches":
            if len(cols) != len(BRANCH_FIELDS):
                raise NetworkFileError(f"expected {len(BRANCH_FIELDS)} fields {BRANCH_FIELDS}, got {len(cols)}", path, lineno)
            kinds = (int, int, float, float)
            vals = [_parse_field(c, k, path, lineno, n) for c, k, n in zip(cols, kinds, BRANCH_FIELDS)]
            try:
                branches.append(Branch(*vals))
            except NetworkError as exc:
                raise NetworkFileError(str(exc), path, lineno) from None
        else:
            raise NetworkFileError("data line outside of a [buses] or [branches] section", path, lineno)
    if not header_seen:
        raise NetworkFileError("empty network file", path)
    return build_network(buses, branches)


def load_network(path: str | os.PathLike) -> NetworkModel:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read(), path=path)


def format_network(network: NetworkModel) -> str:
    out = [f"{FILE_HEADER} {FILE_VERSION}", "[buses]", "# " + "  ".join(BUS_FIELDS)]
    for bus in network.buses:
        out.append(f"{bus.id} {bus.v_min!r} {bus.v_max!r} {int(bus.is_root)} {int(bus.chargeable)}")
    out += ["[branches]", "# " + "  ".join(BRANCH_FIELDS)]
    for br in network.branches:
        out.append(f"{br.from_bus} {br.to_bus} {br.r!r} {br.x!r}")
    return "\n".join(out) + "\n"


def save_network(network: NetworkModel, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_network(network))
