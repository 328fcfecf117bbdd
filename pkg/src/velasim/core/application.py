"""
Simulation assembly.

A simulation is a scenario, a seed, an engine and a set of extensions that
register subsystem services in an svcs registry.
"""

from __future__ import annotations

import inspect
from collections import defaultdict
from collections.abc import Callable, Iterator
from contextlib import ExitStack, contextmanager
from typing import TYPE_CHECKING, Any

import structlog
import svcs

from .engine import Engine, RngStream, SimStats
from .extensions import Extension, HasReport, HasSummary
from .logging import LoggingExtension
from .settings import Settings

if TYPE_CHECKING:
    from ..ext.invariants import InvariantReport
    from ..scenario import ScenarioConfig

logger = structlog.stdlib.get_logger("velasim")

type ExtensionInput = Extension | Callable[..., Extension]
type Subscriber = Callable[..., None]


class Simulation:
    """
    One run's mutable world: engine, random streams, service container and
    a small topic bus that subsystems use to react to each other.
    """

    def __init__(
        self,
        scenario: ScenarioConfig,
        seed: int,
        registry: svcs.Registry,
        settings: Settings | None = None,
        engine: Engine | None = None,
    ) -> None:
        self.scenario = scenario
        self.seed = seed
        self.settings = settings or Settings()
        self.registry = registry
        self.container = svcs.Container(registry)
        self.engine = engine or Engine(keep_log=self.settings.event_log)
        self.state: dict[str, Any] = {}
        self.extensions: list[Extension] = []
        self.stats: SimStats | None = None
        self._streams: dict[str, RngStream] = {}
        self._subscribers: dict[str, list[Subscriber]] = defaultdict(list)

    @property
    def now(self) -> float:
        return self.engine.now

    @property
    def horizon(self) -> float:
        return float(self.scenario.horizon)

    def stream(self, name: str) -> RngStream:
        if name not in self._streams:
            self._streams[name] = RngStream(name, self.seed)
        return self._streams[name]

    def get[T](self, svc_type: type[T]) -> T:
        return self.container.get(svc_type)

    def subscribe(self, topic: str, fn: Subscriber) -> None:
        self._subscribers[topic].append(fn)

    def publish(self, topic: str, **payload: Any) -> None:
        for fn in list(self._subscribers.get(topic, ())):
            fn(**payload)

    def run(self, until: float | None = None) -> SimStats:
        self.stats = self.engine.run_until(self.horizon if until is None else until)
        return self.stats

    def check_invariants(self) -> InvariantReport:
        """Run every registered service ping at the current simulated time."""
        from ..ext.invariants import check_invariants

        return check_invariants(self.container, self.now)

    def reports(self) -> dict[str, list[dict[str, Any]]]:
        tables: dict[str, list[dict[str, Any]]] = {}
        for ext in self.extensions:
            if isinstance(ext, HasReport):
                for name, rows in ext.report(self).items():
                    if name in tables:
                        raise ValueError(f"Report table collision: {name}")
                    tables[name] = rows
        return tables

    def summaries(self) -> dict[str, dict[str, Any]]:
        out: dict[str, dict[str, Any]] = {}
        for ext in self.extensions:
            if isinstance(ext, HasSummary):
                section = type(ext).__name__.removesuffix("Extension").lower()
                out[section] = ext.summary(self)
        return out


def _default_extensions() -> tuple[type[Extension], ...]:
    from ..ext.faults import FaultsExtension
    from ..ext.invariants import InvariantsExtension
    from ..ext.monitoring import MonitoringExtension
    from ..ext.network import NetworkExtension
    from ..ext.power import PowerExtension
    from ..ext.resilience import ResilienceExtension
    from ..ext.scheduler import SchedulerExtension
    from ..ext.topology import TopologyExtension

    return (
        LoggingExtension,
        TopologyExtension,
        NetworkExtension,
        PowerExtension,
        ResilienceExtension,
        MonitoringExtension,
        SchedulerExtension,
        FaultsExtension,
        InvariantsExtension,
    )


def _instantiate_extension(ext: ExtensionInput, settings: Settings | None = None) -> Extension:
    if isinstance(ext, type) or callable(ext):
        sig = inspect.signature(ext)

        # Check if it accepts a 'settings' parameter
        if "settings" in sig.parameters:
            return ext(settings=settings)

        # Check if it accepts **kwargs
        has_var_keyword = any(
            p.kind == inspect.Parameter.VAR_KEYWORD for p in sig.parameters.values()
        )
        if has_var_keyword:
            return ext(settings=settings)

        return ext()
    return ext


@contextmanager
def build_simulation(
    scenario: ScenarioConfig,
    seed: int | None = None,
    *extensions: ExtensionInput,
    settings: Settings | None = None,
    include_defaults: bool = True,
) -> Iterator[Simulation]:
    """
    Assemble a simulation with every subsystem extension entered.

    Extensions are entered in order, so later ones may resolve services that
    earlier ones registered. Passing an extension of the same type as a
    default replaces that default.

    Usage:
        with build_simulation(parse_scenario("vela-2023"), seed=7) as sim:
            sim.run()
            print(sim.summaries())

    Testing:
        with build_simulation(scenario, 0, FakePowerExtension) as sim:
            sim.registry.register_value(PowerSystem, stub)
    """
    settings = settings or Settings()
    seed = scenario.seed if seed is None else seed
    if seed is None:
        seed = settings.default_seed

    if include_defaults:
        # Allow users to override a default extension
        user_types = {ext if isinstance(ext, type) else type(ext) for ext in extensions}
        defaults = [ext for ext in _default_extensions() if ext not in user_types]
        all_inputs: tuple[ExtensionInput, ...] = (*defaults, *extensions)
    else:
        all_inputs = extensions

    registry = svcs.Registry()
    sim = Simulation(scenario, seed, registry, settings)
    sim.extensions = [_instantiate_extension(ext, settings) for ext in all_inputs]

    with registry, ExitStack() as stack:
        stack.callback(sim.container.close)
        for ext in sim.extensions:
            ext_state = stack.enter_context(ext.register(registry, sim))
            if ext_state:
                if overlap := sim.state.keys() & ext_state.keys():
                    raise ValueError(f"Extension state key collision: {overlap}")
                sim.state.update(ext_state)
        logger.debug("simulation_built", extensions=[type(e).__name__ for e in sim.extensions])
        yield sim
