"""Desk-scale simulator of proof-checked federated learning on a DAG ledger."""

from .config import ScenarioConfig, config_from_mapping, load_scenario
from .engine import Metrics, Simulation, emit_outputs, run_scenario
from .errors import ConfigError, SimulationError

__all__ = [
    "ConfigError",
    "Metrics",
    "ScenarioConfig",
    "Simulation",
    "SimulationError",
    "config_from_mapping",
    "emit_outputs",
    "load_scenario",
    "run_scenario",
]
