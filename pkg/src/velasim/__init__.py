"""
velasim - a deterministic discrete-event simulator of GPU training clusters.

Example:
    from velasim import parse_scenario, run_scenario

    config = parse_scenario("vela-resilience-month")
    report = run_scenario(config, seed=7, output_dir="runs")
    print(report.summary["resilience"]["lost_fraction"])

Subsystems can be swapped per run:

    from velasim import build_simulation

    with build_simulation(config, 7, MyPowerExtension) as sim:
        sim.run()
"""

from .core.application import Simulation, build_simulation
from .core.exceptions import (
    MissingArtifacts,
    SafetyViolation,
    ScenarioError,
    SchemaError,
    SimError,
    UnknownPreset,
    exit_code_for,
)
from .core.extensions import BaseExtension, Extension
from .core.settings import Settings
from .runner import RunReport, render_report, run_scenario, sweep
from .scenario import ScenarioConfig, list_presets, parse_scenario

__version__ = "0.1.0"
__all__ = [
    # Simulation
    "build_simulation",
    "Simulation",
    # Extension
    "BaseExtension",
    "Extension",
    # Settings
    "Settings",
    # Scenarios and runs
    "ScenarioConfig",
    "parse_scenario",
    "list_presets",
    "run_scenario",
    "sweep",
    "render_report",
    "RunReport",
    # Exceptions
    "SimError",
    "ScenarioError",
    "SchemaError",
    "UnknownPreset",
    "SafetyViolation",
    "MissingArtifacts",
    "exit_code_for",
]
