"""Willingness-to-pay strategies and per-vehicle battery/budget accounting.

Each connected vehicle posts a weight ``w`` every step. Its time integral is
the money spent, so a vehicle can never post more than its remaining budget
covers over one step. Four update rules are provided:

* UT  - spend the budget uniformly over the allowed stay,
* UC  - steer the battery along a straight line to full at the deadline,
* AF  - pay what is affordable per unit of energy,
* AFT - AF, plus a growing share of the budget as the deadline nears.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

# P_last below this is treated as this (division guard in the AF rule)
P_GUARD = 1e-9


class Strategy(str, enum.Enum):
    UT = "UT"
    UC = "UC"
    AF = "AF"
    AFT = "AFT"

    @classmethod
    def parse(cls, name: "str | Strategy") -> "Strategy":
        try:
            return cls(str(name.value if isinstance(name, Strategy) else name).upper())
        except ValueError:
            raise ValueError(f"unknown strategy {name!r}; expected one of UT, UC, AF, AFT") from None


class Departure(str, enum.Enum):
    STAY = "Stay"
    FULL_BATTERY = "FullBattery"
    BUDGET_SPENT = "BudgetSpent"
    TIME_UP = "TimeUp"


@dataclass(frozen=True)
class VehicleParams:
    """Static description of one vehicle and its strategy constants."""

    B_max: float
    W_max: float
    T_max: float
    strategy: Strategy = Strategy.UT
    kappa: float = 0.001
    w_min: float = 1e-3
    d: float = 0.75
    w_init: float | None = None   # overrides the strategy default first weight

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        for name in ("B_max", "W_max", "T_max", "kappa", "w_min"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not (0.0 <= self.d < 1.0):
            raise ValueError(f"d must lie in [0, 1), got {self.d}")
        if self.w_init is not None and not (math.isfinite(self.w_init) and self.w_init >= 0):
            raise ValueError(f"w_init must be non-negative, got {self.w_init}")

    @property
    def eps_battery(self) -> float:
        return 1e-6 * self.B_max

    @property
    def eps_budget(self) -> float:
        return 1e-9 * self.W_max

    def with_strategy(self, strategy) -> "VehicleParams":
        return replace(self, strategy=Strategy.parse(strategy))


@dataclass
class VehicleState:
    """Mutable state of one connected vehicle. Owned by a single simulation."""

    id: int
    bus: int
    T_arr: float
    B: float = 0.0
    W_spent: float = 0.0
    w: float = 0.0
    last_P: float = 0.0
    energy: float = 0.0      # energy actually stored since arrival
    posted: bool = False     # whether a weight has been posted yet

    def W_rem(self, params: VehicleParams) -> float:
        return max(params.W_max - self.W_spent, 0.0)


def ut_weight(params: VehicleParams) -> float:
    return params.W_max / params.T_max


def initial_weight(params: VehicleParams) -> float:
    """Weight posted at the first step after arrival."""
    if params.w_init is not None:
        return params.w_init
    if params.strategy is Strategy.UT:
        return ut_weight(params)
    if params.strategy is Strategy.UC:
        # budget independent, so identical vehicles with different budgets move together
        return params.kappa * params.B_max
    return params.W_max / (params.B_max * params.T_max)


def uc_update(state: VehicleState, params: VehicleParams, t: float, dt: float) -> float:
    target = (t - state.T_arr) / params.T_max * params.B_max
    return max(0.0, state.w - params.kappa * dt * (state.B - target))


def af_update(state: VehicleState, params: VehicleParams, dt: float) -> float:
    need = max(params.B_max - state.B, params.eps_battery)
    affordable = state.W_rem(params) / need
    paid = state.w / max(state.last_P, P_GUARD)
    return max(state.w + params.kappa * dt * (affordable - paid), params.w_min)


def aft_alpha(params: VehicleParams, elapsed: float) -> float:
    return elapsed / (params.T_max * (1.0 - params.d)) - params.d / (1.0 - params.d)


def aft_update(state: VehicleState, params: VehicleParams, t: float, dt: float) -> float:
    w_af = af_update(state, params, dt)
    alpha = aft_alpha(params, t - state.T_arr)
    remaining = max(state.T_arr + params.T_max - t, dt)
    return max(w_af, alpha * state.W_rem(params) / remaining)


def strategy_weight(state: VehicleState, params: VehicleParams, t: float, dt: float) -> float:
    """Unclamped rule output for the step starting at ``t``."""
    if not state.posted:
        return initial_weight(params)
    s = params.strategy
    if s is Strategy.UT:
        return ut_weight(params)
    if s is Strategy.UC:
        return uc_update(state, params, t, dt)
    if s is Strategy.AF:
        return af_update(state, params, dt)
    return aft_update(state, params, t, dt)


def post_weight(state: VehicleState, params: VehicleParams, t: float, dt: float) -> float:
    """Compute, budget-clamp and store the weight for the step starting at ``t``."""
    w = strategy_weight(state, params, t, dt)
    rem = state.W_rem(params)
    if rem <= params.eps_budget:
        w = 0.0
    else:
        w = min(w, rem / dt)
    state.w = w
    state.posted = True
    return w


def accrue(state: VehicleState, params: VehicleParams, P: float, w: float, dt: float) -> VehicleState:
    """Integrate one step of charging and spending in place."""
    if P < 0 or w < 0:
        raise ValueError("power and weight must be non-negative")
    before = state.B
    state.B = min(state.B + P * dt, params.B_max)
    state.energy += state.B - before
    state.W_spent = min(state.W_spent + w * dt, params.W_max)
    state.last_P = P
    return state


def should_disconnect(state: VehicleState, params: VehicleParams, t: float,
                      eps: float | None = None, eps_w: float | None = None) -> Departure:
    """Departure verdict at time ``t``; precedence Full > Budget > Time."""
    eps = params.eps_battery if eps is None else eps
    eps_w = params.eps_budget if eps_w is None else eps_w
    if state.B >= params.B_max - eps:
        return Departure.FULL_BATTERY
    if params.W_max - state.W_spent <= eps_w:
        return Departure.BUDGET_SPENT
    # relative slack absorbs float drift in t accumulated over many steps
    if t - state.T_arr >= params.T_max * (1.0 - 1e-12):
        return Departure.TIME_UP
    return Departure.STAY
