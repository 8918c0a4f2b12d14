"""Proportionally fair EV charging on radial distribution grids."""

from .allocation import (AllocationProblem, AllocationRequest, AllocationResult, Status, allocate,
                         build_problem, check_exactness, kkt_residuals, solve)
from .network import (Branch, Bus, NetworkModel, admittance, build_network, line_network, load_network,
                      random_tree, save_network, star_network, voltage_limits)
from .report import StatSummary, SweepSpec, export, summarize, sweep
from .simulator import (PoissonArrivals, ScriptedArrival, SimulationConfig, SimulationError, SimulationTrace,
                        run, sample_arrivals, scenario_heterogeneous_aggressive)
from .strategies import Departure, Strategy, VehicleParams, VehicleState

__version__ = "0.1.0"
