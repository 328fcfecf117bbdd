"""
Rack power domains.

Every rack is fed by two PDUs that share its load. Losing one shifts the
whole rack onto the survivor; if that exceeds the PDU rating the servers are
power-braked after ``brake_latency`` seconds, and the breaker tolerates the
overload for at most ``surge_tolerance`` seconds. Power is in kW unless a
name says otherwise.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal

import structlog
import svcs
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    model_validator,
)

from ..core.engine import EventRecord, RngStream, Uniform
from ..core.exceptions import DoubleFailure, UnknownComponent
from ..core.extensions import BaseExtension
from .topology import ClusterTopology, NodeSpec
from .workload import Duration

if TYPE_CHECKING:
    from ..core.application import Simulation

log = structlog.stdlib.get_logger("velasim.power")

OVERLOAD_EPSILON = 1e-9

type ServerLoad = Literal["busy", "idle", "down"]


class PduFailureSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rack: str
    at: Duration = Field(ge=0.0)
    pdu: NonNegativeInt = 0
    repair_after: Duration | None = Field(default=8 * 3600.0, gt=0.0)


class PowerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pdu_rating: PositiveFloat = 20.0
    server_max_power: PositiveFloat = 6.0
    server_braked_power: PositiveFloat = 3.2
    server_idle_power: PositiveFloat = 1.5
    brake_latency: Duration = Field(default=2.0, ge=0.0)
    surge_tolerance: Duration = Field(default=5.0, gt=0.0)
    slowdown_at_min_power: float = Field(default=3.0, ge=1.0)
    pdu_failures: list[PduFailureSpec] = []

    @model_validator(mode="after")
    def _ordered(self) -> PowerConfig:
        if self.server_braked_power >= self.server_max_power:
            raise ValueError("server_braked_power must be below server_max_power")
        if self.brake_latency >= self.surge_tolerance:
            raise ValueError("brake_latency must be below surge_tolerance")
        return self


class PowerSurgeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    samples: PositiveInt = 10_000
    servers_per_rack: PositiveInt = 6
    horizon: Duration = Field(default=30 * 86_400.0, gt=0.0)
    busy_fraction: float = Field(default=1.0, ge=0.0, le=1.0)


# === Domains and traces ===


@dataclass
class PowerDomain:
    rack: str
    servers: list[str]
    pdu_rating: float = 20.0
    server_max_power: float = 6.0
    server_braked_power: float = 3.2
    server_idle_power: float = 1.5
    brake_latency: float = 2.0
    surge_tolerance: float = 5.0
    pdus: int = 2
    failed_pdus: list[int] = field(default_factory=list)
    loads: dict[str, ServerLoad] = field(default_factory=dict)
    braked: bool = False
    braked_servers: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.server_braked_power >= self.server_max_power:
            raise ValueError("braked power must be below max power")
        for server in self.servers:
            self.loads.setdefault(server, "busy")

    @classmethod
    def from_config(cls, rack: str, servers: Iterable[str], config: PowerConfig) -> PowerDomain:
        return cls(
            rack=rack,
            servers=list(servers),
            pdu_rating=config.pdu_rating,
            server_max_power=config.server_max_power,
            server_braked_power=config.server_braked_power,
            server_idle_power=config.server_idle_power,
            brake_latency=config.brake_latency,
            surge_tolerance=config.surge_tolerance,
        )

    def is_braked(self, server: str) -> bool:
        return self.braked or server in self.braked_servers

    def server_power(self, server: str) -> float:
        load = self.loads[server]
        if load == "down" or not self.healthy_pdus():
            return 0.0
        if load == "idle":
            if self.is_braked(server):
                return min(self.server_idle_power, self.server_braked_power)
            return self.server_idle_power
        return self.server_braked_power if self.is_braked(server) else self.server_max_power

    def total(self) -> float:
        return sum(self.server_power(s) for s in self.servers)

    def healthy_pdus(self) -> list[int]:
        return [p for p in range(self.pdus) if p not in self.failed_pdus]

    def braked_total(self) -> float:
        braked = self.braked
        self.braked = True
        try:
            return self.total()
        finally:
            self.braked = braked


def rack_power(domain: PowerDomain, t: float | None = None) -> dict[int, float]:
    """Per-PDU load: the rack total split evenly across healthy PDUs."""
    healthy = domain.healthy_pdus()
    share = domain.total() / len(healthy) if healthy else 0.0
    return {p: (share if p in healthy else 0.0) for p in range(domain.pdus)}


@dataclass(frozen=True, slots=True)
class OverloadInterval:
    rack: str
    pdu: int
    start: float
    end: float
    peak: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class PowerTrace:
    rack: str
    rating: float
    tolerance: float
    samples: dict[int, list[tuple[float, float]]] = field(default_factory=dict)
    brakes: list[float] = field(default_factory=list)
    end: float = 0.0

    def record(self, t: float, loads: dict[int, float]) -> None:
        for pdu, kw in loads.items():
            self.samples.setdefault(pdu, []).append((t, kw))
        self.end = max(self.end, t)

    def overload_intervals(self) -> list[OverloadInterval]:
        intervals = []
        for pdu, series in sorted(self.samples.items()):
            start: float | None = None
            peak = 0.0
            for t, kw in series:
                over = kw > self.rating + OVERLOAD_EPSILON
                if over and start is None:
                    start, peak = t, kw
                elif over:
                    peak = max(peak, kw)
                elif start is not None:
                    intervals.append(OverloadInterval(self.rack, pdu, start, t, peak))
                    start = None
            if start is not None:
                intervals.append(OverloadInterval(self.rack, pdu, start, math.inf, peak))
        return intervals

    def rows(self) -> list[dict[str, Any]]:
        return [
            {"time": t, "rack": self.rack, "pdu": pdu, "kw": kw}
            for pdu, series in sorted(self.samples.items())
            for t, kw in series
        ]


@dataclass(frozen=True, slots=True)
class SurgeVerdict:
    passed: bool
    violations: tuple[OverloadInterval, ...] = ()

    @property
    def label(self) -> str:
        return "PASS" if self.passed else "FAIL"


def check_surge_safety(trace: PowerTrace) -> SurgeVerdict:
    violations = tuple(
        i for i in trace.overload_intervals() if i.duration > trace.tolerance + OVERLOAD_EPSILON
    )
    return SurgeVerdict(passed=not violations, violations=violations)


@dataclass(frozen=True, slots=True)
class PowerEvent:
    time: float
    kind: Literal["surge", "brake"]
    load: float


@dataclass(frozen=True)
class BrakeSequence:
    rack: str
    failed_at: float
    surge_kw: float
    brake_at: float | None
    steady_kw: float
    events: tuple[PowerEvent, ...]
    trace: PowerTrace


def on_psu_failure(domain: PowerDomain, t: float, pdu: int = 0) -> BrakeSequence:
    """
    Lose one PDU at ``t``.

    The surviving PDU carries the full rack immediately. When that exceeds
    its rating a brake follows ``brake_latency`` later; the returned trace
    covers both steps and the steady state after.
    """
    if pdu in domain.failed_pdus or pdu >= domain.pdus:
        raise UnknownComponent(f"{domain.rack} has no healthy PDU {pdu}", details={"pdu": pdu})
    if len(domain.healthy_pdus()) <= 1:
        domain.failed_pdus.append(pdu)
        raise DoubleFailure(
            f"{domain.rack} lost both PDUs", details={"rack": domain.rack, "time": t}
        )
    domain.failed_pdus.append(pdu)

    trace = PowerTrace(domain.rack, domain.pdu_rating, domain.surge_tolerance)
    trace.record(t, rack_power(domain))
    surge = max(rack_power(domain).values())
    events = [PowerEvent(t, "surge", surge)]
    brake_at = None
    steady = surge
    if surge > domain.pdu_rating + OVERLOAD_EPSILON:
        brake_at = t + domain.brake_latency
        healthy = len(domain.healthy_pdus())
        steady = domain.braked_total() / healthy
        events.append(PowerEvent(brake_at, "brake", steady))
        trace.brakes.append(brake_at)
        braked = {p: (steady if p in domain.healthy_pdus() else 0.0) for p in range(domain.pdus)}
        trace.record(brake_at, braked)
    trace.end = t + domain.brake_latency + domain.surge_tolerance
    return BrakeSequence(domain.rack, t, surge, brake_at, steady, tuple(events), trace)


def apply_brake(domain: PowerDomain) -> None:
    domain.braked = True


def release_brake(domain: PowerDomain) -> None:
    domain.braked = False


def gpu_slowdown(power_w: float, node: NodeSpec, slowdown_at_min: float = 3.0) -> float:
    """Linear map from GPU power cap to compute slowdown: max power is 1x."""
    p = min(node.gpu_power_max, max(node.gpu_power_min, power_w))
    fraction = (node.gpu_power_max - p) / (node.gpu_power_max - node.gpu_power_min)
    return 1.0 + fraction * (slowdown_at_min - 1.0)


@dataclass(frozen=True, slots=True)
class SurgeSweepResult:
    samples: int
    failures: int
    longest_overload: float
    post_brake_kw: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def run_surge_sweep(
    config: PowerSurgeConfig, power: PowerConfig, stream: RngStream
) -> SurgeSweepResult:
    """Fail one PDU at random onsets on a fresh rack and verify every trace."""
    onsets = stream.sample(Uniform(0.0, config.horizon), config.samples)
    failures = 0
    longest = 0.0
    post_brake = 0.0
    for k, onset in enumerate(onsets):
        servers = [f"s{i}" for i in range(config.servers_per_rack)]
        domain = PowerDomain.from_config(f"rack-{k}", servers, power)
        if config.busy_fraction < 1.0:
            for s in servers:
                if stream.random() >= config.busy_fraction:
                    domain.loads[s] = "idle"
        sequence = on_psu_failure(domain, float(onset))
        verdict = check_surge_safety(sequence.trace)
        failures += not verdict.passed
        for interval in sequence.trace.overload_intervals():
            longest = max(longest, interval.duration)
        post_brake = max(post_brake, sequence.steady_kw)
    log.info("surge_sweep_done", samples=config.samples, failures=failures, longest=longest)
    return SurgeSweepResult(config.samples, failures, longest, post_brake)


# === Run-time service ===


type PowerListener = Callable[[str, list[str]], None]


class PowerSystem:
    """
    Power state of every rack during a run.

    Listeners are told ``("slowdown", nodes)`` when braking changes and
    ``("down", nodes)`` / ``("up", nodes)`` when a rack loses or regains
    all power.
    """

    def __init__(self, topo: ClusterTopology, config: PowerConfig) -> None:
        self.topo = topo
        self.config = config
        self.domains = {
            rack: PowerDomain.from_config(rack, hosts, config) for rack, hosts in topo.racks.items()
        }
        for domain in self.domains.values():
            for server in domain.servers:
                domain.loads[server] = "idle"
        self.listeners: list[PowerListener] = []
        self.traces: list[PowerTrace] = []
        self.verdicts: list[SurgeVerdict] = []
        self.load_log: list[dict[str, Any]] = []
        self.brake_log: list[dict[str, Any]] = []
        self.server_energy: dict[str, float] = {}
        self.rack_energy: dict[str, float] = {}
        self._last = 0.0
        self._pending_brakes: dict[str, float] = {}

    def _domain(self, node: str) -> PowerDomain:
        try:
            return self.domains[self.topo.rack_of(node)]
        except KeyError as e:
            raise UnknownComponent(f"{node} has no power domain", details={"node": node}) from e

    def _notify(self, kind: str, nodes: list[str]) -> None:
        for listener in self.listeners:
            listener(kind, nodes)

    def advance(self, t: float) -> None:
        """Integrate energy (kJ) up to ``t``."""
        dt = t - self._last
        if dt <= 0:
            return
        for rack, domain in self.domains.items():
            drawn = sum(rack_power(domain).values())
            self.rack_energy[rack] = self.rack_energy.get(rack, 0.0) + drawn * dt
            for server in domain.servers:
                self.server_energy[server] = (
                    self.server_energy.get(server, 0.0) + domain.server_power(server) * dt
                )
        self._last = t

    def _log_loads(self, domain: PowerDomain, t: float) -> None:
        for pdu, kw in rack_power(domain).items():
            self.load_log.append({"time": t, "rack": domain.rack, "pdu": pdu, "kw": kw})

    def set_load(self, node: str, load: ServerLoad, t: float) -> None:
        domain = self._domain(node)
        if domain.loads[node] == load:
            return
        self.advance(t)
        domain.loads[node] = load
        self._log_loads(domain, t)

    def is_braked(self, node: str) -> bool:
        return self._domain(node).is_braked(node)

    def slowdown(self, node: str) -> float:
        if not self.is_braked(node):
            return 1.0
        return gpu_slowdown(
            self.topo.node_spec.gpu_power_min,
            self.topo.node_spec,
            self.config.slowdown_at_min_power,
        )

    def brake_node(self, node: str, t: float, reason: str = "power_feed") -> None:
        """One server lost a feed: it brakes itself without touching the rack."""
        domain = self._domain(node)
        self.advance(t)
        domain.braked_servers[node] = reason
        self.brake_log.append({"time": t, "rack": domain.rack, "node": node, "event": "brake"})
        log.info("brake_applied", node=node, reason=reason, sim_time=t)
        self._log_loads(domain, t)
        self._notify("slowdown", [node])

    def release_node(self, node: str, t: float) -> None:
        domain = self._domain(node)
        if domain.braked_servers.pop(node, None) is None:
            return
        self.advance(t)
        self.brake_log.append({"time": t, "rack": domain.rack, "node": node, "event": "release"})
        self._log_loads(domain, t)
        self._notify("slowdown", [node])

    def pdu_failure(self, rack: str, pdu: int, t: float) -> BrakeSequence | None:
        domain = self.domains.get(rack)
        if domain is None:
            raise UnknownComponent(f"unknown rack {rack!r}", details={"rack": rack})
        self.advance(t)
        try:
            sequence = on_psu_failure(domain, t, pdu)
        except DoubleFailure:
            log.warning("rack_power_lost", rack=rack, sim_time=t)
            self._pending_brakes.pop(rack, None)
            self._log_loads(domain, t)
            self._notify("down", list(domain.servers))
            return None
        self.traces.append(sequence.trace)
        self.verdicts.append(check_surge_safety(sequence.trace))
        self._log_loads(domain, t)
        log.info("pdu_failed", rack=rack, pdu=pdu, surge_kw=sequence.surge_kw, sim_time=t)
        if sequence.brake_at is not None:
            self._pending_brakes[rack] = sequence.brake_at
        return sequence

    def brake_rack(self, rack: str, t: float) -> None:
        if self._pending_brakes.pop(rack, None) is None:
            return
        domain = self.domains[rack]
        self.advance(t)
        apply_brake(domain)
        self.brake_log.append({"time": t, "rack": rack, "node": "", "event": "brake"})
        log.info("brake_applied", rack=rack, sim_time=t)
        self._log_loads(domain, t)
        self._notify("slowdown", list(domain.servers))

    def pdu_repair(self, rack: str, pdu: int, t: float) -> None:
        domain = self.domains[rack]
        if pdu not in domain.failed_pdus:
            return
        self.advance(t)
        was_dark = not domain.healthy_pdus()
        domain.failed_pdus.remove(pdu)
        if was_dark:
            # One feed back: servers return braked so a single PDU is never overloaded.
            if domain.failed_pdus:
                apply_brake(domain)
            self._log_loads(domain, t)
            self._notify("up", list(domain.servers))
            self._notify("slowdown", list(domain.servers))
            return
        if not domain.failed_pdus and domain.braked:
            release_brake(domain)
            self.brake_log.append({"time": t, "rack": rack, "node": "", "event": "release"})
            self._notify("slowdown", list(domain.servers))
        self._log_loads(domain, t)

    def energy_balance(self) -> float:
        """Relative gap between rack-level and server-level energy integrals."""
        racks = sum(self.rack_energy.values())
        servers = sum(self.server_energy.values())
        if racks == 0 and servers == 0:
            return 0.0
        return abs(racks - servers) / max(racks, servers)


class PowerExtension(BaseExtension):
    """
    Registers the :class:`PowerSystem` service and schedules configured PDU
    failures, brakes and repairs on the engine.
    """

    def startup(self, registry: svcs.Registry, sim: Simulation) -> dict[str, Any]:
        config = sim.scenario.power

        def factory(svcs_container: svcs.Container) -> PowerSystem:
            system = PowerSystem(svcs_container.get(ClusterTopology), config)
            system.listeners.append(
                lambda kind, nodes: sim.publish("power_changed", kind=kind, nodes=nodes)
            )
            return system

        def ping(system: PowerSystem) -> None:
            system.advance(sim.now)
            assert system.energy_balance() <= 1e-6, "rack and server energy integrals disagree"

        registry.register_factory(PowerSystem, factory, ping=ping)

        for spec in config.pdu_failures:
            sim.engine.schedule(spec.at, "pdu_failure", spec.rack, spec)
        sim.engine.on("pdu_failure", lambda e: self._on_failure(sim, e))
        sim.engine.on("power_brake", lambda e: sim.get(PowerSystem).brake_rack(e.target, e.time))
        sim.engine.on(
            "pdu_repair", lambda e: sim.get(PowerSystem).pdu_repair(e.target, e.payload, e.time)
        )
        return {}

    def _on_failure(self, sim: Simulation, event: EventRecord) -> None:
        spec: PduFailureSpec = event.payload
        sequence = sim.get(PowerSystem).pdu_failure(spec.rack, spec.pdu, event.time)
        if sequence is not None and sequence.brake_at is not None:
            sim.engine.schedule(sequence.brake_at, "power_brake", spec.rack)
        if spec.repair_after is not None:
            sim.engine.schedule(event.time + spec.repair_after, "pdu_repair", spec.rack, spec.pdu)

    def report(self, sim: Simulation) -> dict[str, list[dict[str, Any]]]:
        system = sim.get(PowerSystem)
        return {"power_trace": system.load_log, "brakes": system.brake_log}

    def summary(self, sim: Simulation) -> dict[str, Any]:
        system = sim.get(PowerSystem)
        system.advance(sim.now)
        return {
            "pdu_failures": len(system.traces),
            "surge_verdicts": [v.label for v in system.verdicts],
            "safe": all(v.passed for v in system.verdicts),
            "energy_kwh": round(sum(system.rack_energy.values()) / 3600.0, 6),
        }
