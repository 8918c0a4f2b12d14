"""JSON scenario and sweep files.

Scenario (``"format": "pfcharge-scenario/1"``)::

    {
      "format": "pfcharge-scenario/1",
      "network": {"type": "star", "n_leaves": 10, "r": 0.1, "x": 0.6},
      "v_nominal": 1.0, "alpha": 0.1,
      "dt": 1.0, "horizon": 500, "seed": 0, "tol": 1e-8, "max_iter": 200,
      "defaults": {"kappa": 0.001, "d": 0.75, "w_min": 0.001},
      "scripted": [{"time": 0, "bus": 2, "B0": 0,
                    "vehicle": {"B_max": 20, "W_max": 500, "T_max": 300, "strategy": "UT"}}],
      "poisson": {"rate": 0.01, "bus_policy": "uniform",
                  "vehicle": {"B_max": 20, "W_max": 500, "T_max": 300, "strategy": "AF"}}
    }

``network`` is one of ``{"type": "star", ...}``, ``{"type": "line", "n_buses": N, ...}``
or ``{"file": "path"}`` (relative paths resolve against the scenario file) or
``{"text": "..."}`` holding a network file inline.

Sweep (``"format": "pfcharge-sweep/1"``) wraps a scenario with a ``poisson``
block and adds ``rates``, ``replications``, ``strategy`` and ``master_seed``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .network import (NetworkModel, format_network, line_network, load_network, parse_network,
                      star_network, voltage_limits)
from .simulator import PoissonArrivals, ScriptedArrival, SimulationConfig
from .strategies import VehicleParams

SCENARIO_FORMAT = "pfcharge-scenario/1"
SWEEP_FORMAT = "pfcharge-sweep/1"
VEHICLE_KEYS = ("B_max", "W_max", "T_max", "strategy", "kappa", "w_min", "d", "w_init")
DEFAULTS = {"kappa": 0.001, "d": 0.75, "w_min": 1e-3}


class ConfigError(ValueError):
    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = None if path is None else str(path)


def _network(doc: dict, v_nominal: float, alpha: float, base: Path | None) -> NetworkModel:
    if "text" in doc:
        return parse_network(doc["text"])
    if "file" in doc:
        p = Path(doc["file"])
        if not p.is_absolute() and base is not None:
            p = base / p
        return load_network(p)
    limits = voltage_limits(v_nominal, alpha)
    kind = doc.get("type")
    r, x = float(doc.get("r", 0.1)), float(doc.get("x", 0.6))
    if kind == "star":
        return star_network(int(doc.get("n_leaves", 10)), r, x, limits)
    if kind == "line":
        return line_network(int(doc["n_buses"]), r, x, limits)
    raise ConfigError(f"unknown network type {kind!r}")


def _vehicle(doc: dict, defaults: dict) -> VehicleParams:
    unknown = set(doc) - set(VEHICLE_KEYS)
    if unknown:
        raise ConfigError(f"unknown vehicle keys {sorted(unknown)}")
    merged = {**defaults, **doc}
    return VehicleParams(**{k: merged[k] for k in VEHICLE_KEYS if k in merged})


def config_from_dict(doc: dict, base: str | os.PathLike | None = None) -> SimulationConfig:
    if doc.get("format") != SCENARIO_FORMAT:
        raise ConfigError(f"expected format {SCENARIO_FORMAT!r}, got {doc.get('format')!r}")
    try:
        v_nominal = float(doc.get("v_nominal", 1.0))
        alpha = float(doc.get("alpha", 0.1))
        defaults = {**DEFAULTS, **doc.get("defaults", {})}
        net = _network(doc["network"], v_nominal, alpha, None if base is None else Path(base))
        scripted = tuple(ScriptedArrival(float(a["time"]), int(a["bus"]), _vehicle(a["vehicle"], defaults),
                                         float(a.get("B0", 0.0)))
                         for a in doc.get("scripted", []))
        poisson = None
        if doc.get("poisson") is not None:
            p = doc["poisson"]
            poisson = PoissonArrivals(
                rate=float(p["rate"]), template=_vehicle(p["vehicle"], defaults),
                bus_policy=p.get("bus_policy", "uniform"),
                buses=None if p.get("buses") is None else tuple(int(b) for b in p["buses"]),
                bus_weights=None if p.get("bus_weights") is None else tuple(float(w) for w in p["bus_weights"]),
                B0=float(p.get("B0", 0.0)))
        kwargs = {k: doc[k] for k in ("dt", "horizon", "seed", "tol", "max_iter", "power_cap") if k in doc}
        return SimulationConfig(network=net, scripted=scripted, poisson=poisson, v_nominal=v_nominal,
                                **kwargs)
    except KeyError as exc:
        raise ConfigError(f"missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _params_dict(p: VehicleParams) -> dict:
    out = {"B_max": p.B_max, "W_max": p.W_max, "T_max": p.T_max, "strategy": p.strategy.value,
           "kappa": p.kappa, "w_min": p.w_min, "d": p.d}
    if p.w_init is not None:
        out["w_init"] = p.w_init
    return out


def config_to_dict(config: SimulationConfig, alpha: float = 0.1) -> dict:
    """Inverse of :func:`config_from_dict`; the network is embedded as a file text."""
    doc = {
        "format": SCENARIO_FORMAT,
        "network": {"text": format_network(config.network)},
        "v_nominal": config.v_nominal, "alpha": alpha,
        "dt": config.dt, "horizon": config.horizon, "seed": config.seed,
        "tol": config.tol, "max_iter": config.max_iter,
        "scripted": [{"time": a.time, "bus": a.bus, "B0": a.B0, "vehicle": _params_dict(a.params)}
                     for a in config.scripted],
    }
    if config.power_cap is not None:
        doc["power_cap"] = config.power_cap
    if config.poisson is not None:
        p = config.poisson
        doc["poisson"] = {"rate": p.rate, "bus_policy": p.bus_policy, "B0": p.B0,
                          "buses": None if p.buses is None else list(p.buses),
                          "bus_weights": None if p.bus_weights is None else list(p.bus_weights),
                          "vehicle": _params_dict(p.template)}
    return doc


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read: {exc.strerror}", path) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", path) from None


def load_scenario(path) -> SimulationConfig:
    doc = load_json(path)
    try:
        return config_from_dict(doc, Path(path).parent)
    except ConfigError as exc:
        raise ConfigError(str(exc), path) from None
