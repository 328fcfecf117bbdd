"""
Failure taxonomy, schedules, effects and repairs.

Three classes of failure are modelled. Hard crashes take a node down.
Subtle hardware faults and software faults leave the node up but slow it,
corrupt it silently or make a crash more likely on every step. Each kind
has a default rate in events per node-month; all rates are configurable.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
import structlog
import svcs
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, model_validator

from ..core.engine import (
    Distribution,
    DistributionConfig,
    EventRecord,
    LogNormal,
    RngStream,
    Uniform,
)
from ..core.exceptions import UnknownComponent
from ..core.extensions import BaseExtension
from .power import PowerSystem
from .topology import ClusterTopology, DeltaChange, TopologyDelta, apply_delta
from .workload import Duration, JobState

if TYPE_CHECKING:
    from ..core.application import Simulation

log = structlog.stdlib.get_logger("velasim.faults")

MONTH = 30 * 86_400.0
HOUR = 3600.0
DAY = 86_400.0


class FailureClass(StrEnum):
    HARD_CRASH = "hard_crash"
    SUBTLE = "subtle"
    SOFTWARE = "software"


class FailureKind(StrEnum):
    HGX_BOARD = "hgx_board"
    DIMM = "dimm"
    NVLINK_SWITCH = "nvlink_switch"
    GPU_FAIL = "gpu_fail"
    HBM_CORRUPT = "hbm_corrupt"
    PCIE_LINK_FAIL = "pcie_link_fail"
    PORT_FAIL = "port_fail"
    POWER_FEED = "power_feed"
    PCIE_DOWNGRADE = "pcie_downgrade"
    CUDA_ALLOC_ERR = "cuda_alloc_err"
    ROW_REMAP_PENDING = "row_remap_pending"


class Effect(StrEnum):
    NODE_DOWN = "node_down"
    ESCALATION = "escalation"
    SILENT_CORRUPTION = "silent_corruption"
    HOST_SCALE = "host_scale"
    PORT_DOWN = "port_down"
    NODE_BRAKE = "node_brake"


@dataclass(frozen=True, slots=True)
class FailureType:
    kind: FailureKind
    failure_class: FailureClass
    effect: Effect
    rate: float
    magnitude: float
    repair: Literal["reboot", "replace"]
    repair_time: Distribution

    def __post_init__(self) -> None:
        if self.rate < 0:
            raise ValueError(f"{self.kind} rate must be >= 0")


def _vendor() -> Distribution:
    return LogNormal(3 * DAY, 0.5)


_HARD, _SUBTLE, _SOFT = FailureClass.HARD_CRASH, FailureClass.SUBTLE, FailureClass.SOFTWARE

# kind, class, effect, rate per node-month, magnitude, repair path, repair time
FAILURE_TAXONOMY: dict[FailureKind, FailureType] = {
    t.kind: t
    for t in (
        FailureType(
            FailureKind.HGX_BOARD, _HARD, Effect.NODE_DOWN, 0.008, 1.0, "replace", _vendor()
        ),
        FailureType(
            FailureKind.DIMM, _HARD, Effect.NODE_DOWN, 0.008, 1.0, "replace",
            LogNormal(4 * HOUR, 0.5),
        ),
        FailureType(
            FailureKind.NVLINK_SWITCH, _HARD, Effect.NODE_DOWN, 0.004, 1.0, "replace", _vendor()
        ),
        FailureType(
            FailureKind.GPU_FAIL, _SUBTLE, Effect.ESCALATION, 0.004, 0.01, "replace", _vendor()
        ),
        FailureType(
            FailureKind.HBM_CORRUPT, _SUBTLE, Effect.SILENT_CORRUPTION, 0.002, 1.0, "replace",
            _vendor(),
        ),
        FailureType(
            FailureKind.PCIE_LINK_FAIL, _SUBTLE, Effect.HOST_SCALE, 0.002, 0.0625, "replace",
            LogNormal(DAY, 0.5),
        ),
        FailureType(
            FailureKind.PORT_FAIL, _SUBTLE, Effect.PORT_DOWN, 0.004, 1.0, "replace",
            LogNormal(6 * HOUR, 0.5),
        ),
        FailureType(
            FailureKind.POWER_FEED, _SUBTLE, Effect.NODE_BRAKE, 0.004, 1.0, "replace",
            LogNormal(8 * HOUR, 0.5),
        ),
        # Gen1-class host link: 24 GB/s x 0.125
        FailureType(
            FailureKind.PCIE_DOWNGRADE, _SOFT, Effect.HOST_SCALE, 0.03, 0.125, "reboot",
            LogNormal(DAY, 0.5),
        ),
        FailureType(
            FailureKind.CUDA_ALLOC_ERR, _SOFT, Effect.ESCALATION, 0.01, 0.002, "reboot",
            LogNormal(DAY, 0.5),
        ),
        FailureType(
            FailureKind.ROW_REMAP_PENDING, _SOFT, Effect.ESCALATION, 0.01, 1e-4, "reboot",
            LogNormal(DAY, 0.5),
        ),
    )
}

HARD_CRASH_KINDS = tuple(k for k, t in FAILURE_TAXONOMY.items() if t.failure_class is _HARD)


def default_rates(hard_crash_rate: float | None = None) -> dict[FailureKind, float]:
    """
    Default per-kind rates. ``hard_crash_rate`` rescales the hard-crash kinds
    so they sum to it while keeping their relative mix.
    """
    rates = {kind: t.rate for kind, t in FAILURE_TAXONOMY.items()}
    if hard_crash_rate is not None:
        total = sum(rates[k] for k in HARD_CRASH_KINDS)
        for k in HARD_CRASH_KINDS:
            rates[k] = rates[k] / total * hard_crash_rate
    return rates


# === Configuration ===


class FaultInjection(BaseModel):
    """A failure of a given kind, or a raw topology change, at a fixed time."""

    model_config = ConfigDict(extra="forbid")

    at: Duration = Field(ge=0.0)
    target: str
    kind: FailureKind | None = None
    change: DeltaChange | None = None
    factor: float = Field(default=1.0, gt=0.0, le=1.0)
    duration: Duration | None = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _one_of(self) -> FaultInjection:
        if (self.kind is None) == (self.change is None):
            raise ValueError("an injection names exactly one of kind or change")
        return self


class FaultsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    hard_crash_rate: NonNegativeFloat | None = None
    rates: dict[FailureKind, NonNegativeFloat] = {}
    escalation: dict[FailureKind, float] = {}
    repair: dict[FailureKind, DistributionConfig] = {}
    reboot_time: Duration = Field(default=600.0, gt=0.0)
    reboot_success: float = Field(default=0.95, gt=0.0, le=1.0)
    max_reboots: int = Field(default=5, ge=1)
    injections: list[FaultInjection] = []

    @model_validator(mode="after")
    def _probabilities(self) -> FaultsConfig:
        for kind, p in self.escalation.items():
            if FAILURE_TAXONOMY[kind].effect is not Effect.ESCALATION:
                raise ValueError(f"{kind} does not escalate")
            if not 0 < p <= 1:
                raise ValueError(f"escalation probability for {kind} must be in (0, 1]")
        return self

    def resolved_rates(self) -> dict[FailureKind, float]:
        rates = default_rates(self.hard_crash_rate)
        rates.update(self.rates)
        return rates

    def failure_type(self, kind: FailureKind) -> FailureType:
        base = FAILURE_TAXONOMY[kind]
        return FailureType(
            kind=kind,
            failure_class=base.failure_class,
            effect=base.effect,
            rate=self.resolved_rates()[kind],
            magnitude=self.escalation.get(kind, base.magnitude),
            repair=base.repair,
            repair_time=self.repair[kind].build() if kind in self.repair else base.repair_time,
        )


# === Events ===


@dataclass
class FailureEvent:
    id: str
    kind: FailureKind
    target: str
    onset: float
    magnitude: float = 1.0
    component: str | None = None
    detected_at: float | None = None
    repaired_at: float | None = None
    applied: bool = False

    @property
    def failure_class(self) -> FailureClass:
        return FAILURE_TAXONOMY[self.kind].failure_class

    @property
    def effect(self) -> Effect:
        return FAILURE_TAXONOMY[self.kind].effect

    @property
    def active(self) -> bool:
        return self.applied and self.repaired_at is None

    def mark_detected(self, t: float) -> bool:
        """Record detection once; later detections are ignored."""
        if self.detected_at is not None:
            return False
        self.detected_at = max(t, self.onset)
        return True

    def as_row(self) -> dict[str, Any]:
        lag = None if self.detected_at is None else self.detected_at - self.onset
        return {
            "id": self.id,
            "time": self.onset,
            "kind": str(self.kind),
            "class": str(self.failure_class),
            "target": self.target,
            "component": self.component or "",
            "effect": str(self.effect),
            "detected_at": self.detected_at,
            "detection_lag": lag,
            "repaired_at": self.repaired_at,
        }


def sample_failure_schedule(
    rates: Mapping[FailureKind | str, float],
    nodes: int | Sequence[str],
    horizon: float,
    stream: RngStream,
    magnitudes: Mapping[FailureKind, float] | None = None,
) -> list[FailureEvent]:
    """
    Independent Poisson processes per node and kind over ``[0, horizon)``.

    Each kind draws from its own child stream, so changing one rate never
    moves another kind's events.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    names = [f"node{i}" for i in range(nodes)] if isinstance(nodes, int) else list(nodes)
    raw: list[tuple[float, str, str]] = []
    for kind_name in sorted(str(k) for k in rates):
        kind = FailureKind(kind_name)
        rate = rates[kind]
        if rate < 0:
            raise ValueError(f"{kind} rate must be >= 0")
        if rate == 0 or not names:
            continue
        sub = stream.child(kind_name)
        counts = sub.poisson(rate * horizon / MONTH, len(names))
        total = int(counts.sum())
        if total == 0:
            continue
        onsets = sub.sample(Uniform(0.0, horizon), total)
        targets = np.repeat(np.arange(len(names)), counts)
        raw.extend((float(t), kind_name, names[i]) for t, i in zip(onsets, targets, strict=True))
    raw.sort()
    mags = magnitudes or {}
    return [
        FailureEvent(
            id=f"f{i:05d}",
            kind=FailureKind(kind),
            target=target,
            onset=onset,
            magnitude=mags.get(FailureKind(kind), FAILURE_TAXONOMY[FailureKind(kind)].magnitude),
        )
        for i, (onset, kind, target) in enumerate(raw)
    ]


# === Cluster health ===


type HealthListener = Callable[[str, FailureEvent], None]


@dataclass
class ClusterHealth:
    """
    Ground truth of which faults are active where.

    Listeners receive ``("down" | "up" | "degraded" | "restored", event)``.
    """

    topo: ClusterTopology
    power: PowerSystem | None = None
    events: dict[str, FailureEvent] = field(default_factory=dict)
    remapped_rows: dict[str, int] = field(default_factory=dict)
    listeners: list[HealthListener] = field(default_factory=list)

    def _notify(self, change: str, event: FailureEvent) -> None:
        for listener in self.listeners:
            listener(change, event)

    def active_on(self, node: str) -> list[FailureEvent]:
        return [e for e in self.events.values() if e.active and e.target == node]

    def has(self, node: str, *kinds: FailureKind) -> bool:
        return any(e.kind in kinds for e in self.active_on(node))

    def is_down(self, node: str) -> bool:
        return any(e.effect is Effect.NODE_DOWN for e in self.active_on(node))

    def escalation_probability(self, node: str) -> float:
        survive = 1.0
        for e in self.active_on(node):
            if e.effect is Effect.ESCALATION:
                survive *= 1.0 - e.magnitude
        return 1.0 - survive

    def host_scale(self, node: str) -> float:
        scales = [e.magnitude for e in self.active_on(node) if e.effect is Effect.HOST_SCALE]
        return min(scales, default=1.0)

    def corrupting(self, nodes: Iterable[str]) -> list[FailureEvent]:
        wanted = set(nodes)
        return [
            e for e in self.events.values()
            if e.active and e.effect is Effect.SILENT_CORRUPTION and e.target in wanted
        ]


@dataclass(frozen=True, slots=True)
class FaultEffects:
    event_id: str
    effect: Effect
    target: str
    crashed_jobs: tuple[str, ...] = ()
    delta: TopologyDelta | None = None


def _port_link(topo: ClusterTopology, node: str, stream: RngStream | None) -> str:
    ports = [(nic, sw) for nic in topo.nics(node) for nic, sw, _ in topo.ports(nic)]
    if not ports:
        raise UnknownComponent(f"{node} has no network port", details={"node": node})
    nic, sw = ports[stream.integers(len(ports)) if stream else 0]
    for name, ends in topo.links.items():
        if set(ends) == {nic, sw}:
            return name
    raise UnknownComponent(f"no link between {nic} and {sw}", details={"nic": nic, "switch": sw})


def apply_failure(
    event: FailureEvent,
    cluster: ClusterHealth,
    jobs: Iterable[JobState] = (),
    stream: RngStream | None = None,
) -> FaultEffects:
    """
    Apply ``event`` to the cluster at its onset.

    Only node-down effects crash jobs directly; the caller owns the job
    state machine and acts on ``crashed_jobs``.
    """
    topo = cluster.topo
    if event.target not in topo.hosts:
        raise UnknownComponent(f"unknown node {event.target!r}", details={"target": event.target})
    if event.applied:
        return FaultEffects(event.id, event.effect, event.target)
    cluster.events[event.id] = event
    event.applied = True
    crashed: tuple[str, ...] = ()
    delta = None

    match event.effect:
        case Effect.NODE_DOWN:
            crashed = tuple(sorted(j.id for j in jobs if event.target in j.nodes))
            if cluster.power is not None:
                cluster.power.set_load(event.target, "down", event.onset)
        case Effect.NODE_BRAKE:
            if cluster.power is not None:
                cluster.power.brake_node(event.target, event.onset, reason=str(event.kind))
        case Effect.HOST_SCALE:
            event.component = f"{event.target}/pcie"
            scale = cluster.host_scale(event.target)
            delta = TopologyDelta(event.component, DeltaChange.BW_SCALE, scale)
            apply_delta(topo, delta)
        case Effect.PORT_DOWN:
            event.component = _port_link(topo, event.target, stream)
            delta = TopologyDelta(event.component, DeltaChange.LINK_DOWN)
            apply_delta(topo, delta)
        case Effect.ESCALATION:
            if event.kind is FailureKind.ROW_REMAP_PENDING:
                cluster.remapped_rows[event.target] = cluster.remapped_rows.get(event.target, 0) + 1
        case Effect.SILENT_CORRUPTION:
            pass

    log.info(
        "fault_applied",
        fault=event.id,
        kind=str(event.kind),
        target=event.target,
        component=event.component,
        crashed=list(crashed),
        sim_time=event.onset,
    )
    cluster._notify("down" if event.effect is Effect.NODE_DOWN else "degraded", event)
    return FaultEffects(event.id, event.effect, event.target, crashed, delta)


@dataclass(frozen=True, slots=True)
class RepairPolicy:
    reboot_time: float = 600.0
    reboot_success: float = 0.95
    max_reboots: int = 5

    @classmethod
    def from_config(cls, config: FaultsConfig) -> RepairPolicy:
        return cls(config.reboot_time, config.reboot_success, config.max_reboots)


def repair_duration(
    event: FailureEvent,
    policy: RepairPolicy,
    stream: RngStream,
    failure_type: FailureType | None = None,
) -> float:
    """
    Time from detection to the node being healthy again.

    Software faults are cleared by reboots that each succeed with
    ``reboot_success``; if every attempt fails the node goes to the long
    repair path as hardware would.
    """
    ft = failure_type or FAILURE_TAXONOMY[event.kind]
    if ft.repair == "reboot":
        elapsed = 0.0
        for attempt in range(policy.max_reboots):
            elapsed += policy.reboot_time
            if stream.random() < policy.reboot_success:
                if attempt:
                    log.debug("reboot_retried", fault=event.id, attempts=attempt + 1)
                return elapsed
        return elapsed + stream.draw(ft.repair_time)
    return stream.draw(ft.repair_time)


def repair(event: FailureEvent, cluster: ClusterHealth, now: float) -> bool:
    """Revert ``event``'s effects. Repairing an event that is not active is a no-op."""
    if not event.active:
        return False
    topo = cluster.topo
    detected = event.detected_at if event.detected_at is not None else event.onset
    event.repaired_at = max(now, detected)
    if event.detected_at is None:
        event.detected_at = event.repaired_at
    node = event.target

    match event.effect:
        case Effect.NODE_DOWN:
            if cluster.power is not None and not cluster.is_down(node):
                cluster.power.set_load(node, "idle", now)
        case Effect.NODE_BRAKE:
            if cluster.power is not None and not cluster.has(node, FailureKind.POWER_FEED):
                cluster.power.release_node(node, now)
        case Effect.HOST_SCALE:
            scale = cluster.host_scale(node)
            apply_delta(topo, TopologyDelta(f"{node}/pcie", DeltaChange.BW_SCALE, scale))
        case Effect.PORT_DOWN:
            still_down = any(
                e.component == event.component and e.effect is Effect.PORT_DOWN
                for e in cluster.active_on(node)
            )
            if event.component and not still_down:
                apply_delta(topo, TopologyDelta(event.component, DeltaChange.LINK_UP))
        case Effect.ESCALATION:
            if event.kind is FailureKind.ROW_REMAP_PENDING:
                cluster.remapped_rows[node] = max(0, cluster.remapped_rows.get(node, 0) - 1)
        case Effect.SILENT_CORRUPTION:
            pass

    log.info("fault_repaired", fault=event.id, kind=str(event.kind), target=node, sim_time=now)
    cluster._notify("up" if event.effect is Effect.NODE_DOWN else "restored", event)
    return True


# === Extension ===


class FaultsExtension(BaseExtension):
    """
    Samples the run's failure schedule, applies each failure at its onset
    and repairs it once the failed node is out of service.

    Publishes ``fault_applied`` at onset and ``fault_repaired`` when a
    repair completes. Detection is published by monitoring (or by the
    scheduler when an escalation crashes a job) as ``fault_detected``; the
    scheduler publishes ``repair_ready`` when it takes the node out of
    service, which for a drained node is the job's next checkpoint.
    """

    def startup(self, registry: svcs.Registry, sim: Simulation) -> dict[str, Any]:
        config: FaultsConfig = sim.scenario.faults
        self.config = config
        self.policy = RepairPolicy.from_config(config)

        def factory(svcs_container: svcs.Container) -> ClusterHealth:
            health = ClusterHealth(
                svcs_container.get(ClusterTopology), svcs_container.get(PowerSystem)
            )
            health.listeners.append(
                lambda change, event: sim.publish("node_health", change=change, event=event)
            )
            return health

        def ping(health: ClusterHealth) -> None:
            for event in health.events.values():
                if event.detected_at is not None:
                    assert event.onset <= event.detected_at, f"{event.id} detected before onset"
                if event.repaired_at is not None:
                    detected = event.detected_at
                    assert detected is not None and detected <= event.repaired_at, (
                        f"{event.id} repaired before detection"
                    )

        registry.register_factory(ClusterHealth, factory, ping=ping)

        schedule: list[FailureEvent] = []
        if config.enabled:
            magnitudes = {k: config.failure_type(k).magnitude for k in FailureKind}
            schedule = sample_failure_schedule(
                config.resolved_rates(),
                sim.get(ClusterTopology).hosts,
                sim.horizon,
                sim.stream("faults"),
                magnitudes=magnitudes,
            )
        for k, injection in enumerate(config.injections):
            if injection.kind is not None:
                schedule.append(
                    FailureEvent(
                        id=f"inj{k:03d}",
                        kind=injection.kind,
                        target=injection.target,
                        onset=injection.at,
                        magnitude=config.failure_type(injection.kind).magnitude,
                    )
                )
            else:
                sim.engine.schedule(injection.at, "topology_change", injection.target, injection)
        schedule.sort(key=lambda e: (e.onset, e.id))
        for event in schedule:
            sim.engine.schedule(event.onset, "fault_onset", event.target, event)
        self.schedule = schedule
        log.info("failure_schedule_ready", events=len(schedule))

        sim.engine.on("fault_onset", lambda e: self._on_onset(sim, e))
        sim.engine.on("repair_done", lambda e: self._on_repair(sim, e))
        sim.engine.on("topology_change", lambda e: self._on_topology_change(sim, e))
        sim.subscribe("repair_ready", lambda event: self._on_repair_ready(sim, event))
        return {"failure_schedule": schedule}

    def _on_onset(self, sim: Simulation, record: EventRecord) -> None:
        event: FailureEvent = record.payload
        health = sim.get(ClusterHealth)
        apply_failure(event, health, stream=sim.stream("faults/ports").child(event.id))
        sim.publish("fault_applied", event=event)

    def _on_repair_ready(self, sim: Simulation, event: FailureEvent) -> None:
        if not event.active or event.detected_at is None:
            return
        ft = self.config.failure_type(event.kind)
        duration = repair_duration(event, self.policy, sim.stream("repairs").child(event.id), ft)
        sim.engine.schedule(sim.now + duration, "repair_done", event.target, event)

    def _on_repair(self, sim: Simulation, record: EventRecord) -> None:
        event: FailureEvent = record.payload
        if repair(event, sim.get(ClusterHealth), record.time):
            sim.publish("fault_repaired", event=event)

    def _on_topology_change(self, sim: Simulation, record: EventRecord) -> None:
        injection: FaultInjection = record.payload
        topo = sim.get(ClusterTopology)
        assert injection.change is not None
        apply_delta(topo, TopologyDelta(injection.target, injection.change, injection.factor))
        if injection.duration is not None and injection.change is not DeltaChange.LINK_UP:
            revert = (
                DeltaChange.LINK_UP
                if injection.change is DeltaChange.LINK_DOWN
                else DeltaChange.BW_SCALE
            )
            sim.engine.schedule(
                record.time + injection.duration,
                "topology_change",
                injection.target,
                FaultInjection(
                    at=record.time + injection.duration, target=injection.target, change=revert
                ),
            )

    def report(self, sim: Simulation) -> dict[str, list[dict[str, Any]]]:
        return {"failures": [e.as_row() for e in self.schedule if e.applied]}

    def summary(self, sim: Simulation) -> dict[str, Any]:
        applied = [e for e in self.schedule if e.applied]
        by_class: dict[str, int] = {str(c): 0 for c in FailureClass}
        for e in applied:
            by_class[str(e.failure_class)] += 1
        lags = [e.detected_at - e.onset for e in applied if e.detected_at is not None]
        return {
            "failures": len(applied),
            "by_class": by_class,
            "detected": len(lags),
            "mean_detection_lag": (sum(lags) / len(lags)) if lags else None,
            "repaired": sum(e.repaired_at is not None for e in applied),
            "unrepaired_at_end": sum(e.active for e in applied),
            "max_detection_lag": max(lags) if lags else None,
        }
