"""
Health checks, alert rules, detection latency and the tiered metric store.

Lightweight checks run on every node each sweep; intrusive checks need the
node idle and hold it out of service for their runtime. Alert rules average
a window of samples and fire once when the window first violates, so a
single contention dip cannot raise an alert.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from collections import defaultdict, deque
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Any, Literal

import structlog
import svcs
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt

from ..core.engine import EventRecord, LogNormal, Normal, RngStream, Uniform
from ..core.exceptions import NodeBusy
from ..core.extensions import BaseExtension
from .faults import ClusterHealth, FailureClass, FailureEvent, FailureKind
from .power import PowerSystem
from .workload import Duration

if TYPE_CHECKING:
    from ..core.application import Simulation

log = structlog.stdlib.get_logger("velasim.monitoring")

HOUR = 3600.0
DAY = 86_400.0


class CheckKind(StrEnum):
    PCIE_BW = "pcie_bw"
    REMAPPED_ROWS = "remapped_rows"
    POWER_THROTTLE_FLAG = "power_throttle_flag"
    GPU_MEM_BW = "gpu_mem_bw"
    PING = "ping"
    IPERF_LIKE = "iperf_like"
    DCGM_L3_LIKE = "dcgm_l3_like"


@dataclass(frozen=True, slots=True)
class HealthCheck:
    kind: CheckKind
    intrusive: bool = False
    period: float = HOUR
    runtime: float = 60.0


@dataclass(frozen=True, slots=True)
class HealthCheckResult:
    node: str
    kind: CheckKind
    time: float
    value: float | None
    passed: bool | None


class Posture(StrEnum):
    REACTIVE = "reactive"
    PROACTIVE = "proactive"


class AlertRule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    check: CheckKind
    window: PositiveInt = 1
    threshold: float
    comparison: Literal["below", "above"] = "below"
    reveals: tuple[FailureKind, ...] = ()

    def violated(self, values: Sequence[float]) -> bool:
        mean = sum(values) / len(values)
        return mean < self.threshold if self.comparison == "below" else mean > self.threshold


DEFAULT_RULES: tuple[AlertRule, ...] = (
    AlertRule(
        name="pcie_degraded",
        check=CheckKind.PCIE_BW,
        window=12,
        threshold=3.4,
        reveals=(FailureKind.PCIE_DOWNGRADE, FailureKind.PCIE_LINK_FAIL),
    ),
    AlertRule(
        name="pcie_link_lost",
        check=CheckKind.PCIE_BW,
        threshold=2.0,
        reveals=(FailureKind.PCIE_LINK_FAIL,),
    ),
    AlertRule(
        name="row_remap_pending",
        check=CheckKind.REMAPPED_ROWS,
        threshold=0.0,
        comparison="above",
        reveals=(FailureKind.ROW_REMAP_PENDING,),
    ),
    AlertRule(
        name="power_brake",
        check=CheckKind.POWER_THROTTLE_FLAG,
        threshold=0.5,
        comparison="above",
        reveals=(FailureKind.POWER_FEED,),
    ),
    AlertRule(
        name="gpu_mem_bw_low",
        check=CheckKind.GPU_MEM_BW,
        threshold=1000.0,
        reveals=(FailureKind.GPU_FAIL,),
    ),
    AlertRule(
        name="nic_unreachable",
        check=CheckKind.PING,
        threshold=0.999,
        reveals=(FailureKind.PORT_FAIL,),
    ),
    AlertRule(
        name="dcgm_failed",
        check=CheckKind.DCGM_L3_LIKE,
        threshold=0.5,
        reveals=(FailureKind.HBM_CORRUPT, FailureKind.GPU_FAIL),
    ),
)


class TelemetryConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = False
    gpu_period: Duration = Field(default=5.0, gt=0.0)
    system_period: Duration = Field(default=60.0, gt=0.0)


class MonitoringConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    posture: Posture = Posture.PROACTIVE
    check_period: Duration = Field(default=HOUR, gt=0.0)
    intrusive_period: Duration = Field(default=DAY, gt=0.0)
    intrusive_runtime: Duration = Field(default=1800.0, gt=0.0)
    hard_crash_latency: Duration = Field(default=300.0, ge=0.0)
    log_alert_latency: Duration = Field(default=600.0, ge=0.0)
    reactive_mean: Duration = Field(default=DAY, gt=0.0)
    reactive_sigma: PositiveFloat = 1.0
    noise: float = Field(default=0.05, ge=0.0)
    contention_probability: float = Field(default=0.05, ge=0.0, le=1.0)
    contention_factor: float = Field(default=0.5, gt=0.0, le=1.0)
    nominal_gpu_mem_bw: PositiveFloat = 1800.0
    rules: list[AlertRule] = Field(default_factory=lambda: list(DEFAULT_RULES))
    telemetry: TelemetryConfig = TelemetryConfig()

    def checks(self) -> dict[CheckKind, HealthCheck]:
        lightweight = {
            kind: HealthCheck(kind, period=self.check_period)
            for kind in CheckKind
            if kind is not CheckKind.DCGM_L3_LIKE
        }
        lightweight[CheckKind.DCGM_L3_LIKE] = HealthCheck(
            CheckKind.DCGM_L3_LIKE,
            intrusive=True,
            period=self.intrusive_period,
            runtime=self.intrusive_runtime,
        )
        return lightweight


# === Checks ===


def _passed(kind: CheckKind, value: float, rules: Iterable[AlertRule]) -> bool:
    return not any(r.violated([value]) for r in rules if r.check is kind)


def run_health_check(
    node: str,
    check: HealthCheck,
    cluster: ClusterHealth,
    now: float,
    stream: RngStream,
    *,
    busy: bool = False,
    config: MonitoringConfig | None = None,
) -> HealthCheckResult:
    """Measure ``node``'s true simulated state with Gaussian measurement noise."""
    if check.intrusive and busy:
        raise NodeBusy(
            f"{check.kind} needs exclusive access to {node}",
            details={"node": node, "check": str(check.kind)},
        )
    config = config or MonitoringConfig()
    topo = cluster.topo
    noise = Normal(1.0, config.noise)

    match check.kind:
        case CheckKind.PCIE_BW:
            value = topo.host_link_gbs(node) * max(0.0, stream.draw(noise))
            if busy and stream.random() < config.contention_probability:
                value *= config.contention_factor
        case CheckKind.REMAPPED_ROWS:
            value = float(cluster.remapped_rows.get(node, 0))
        case CheckKind.POWER_THROTTLE_FLAG:
            braked = cluster.power is not None and cluster.power.is_braked(node)
            value = 1.0 if braked else 0.0
        case CheckKind.GPU_MEM_BW:
            failed = cluster.has(node, FailureKind.GPU_FAIL)
            value = 0.0 if failed else config.nominal_gpu_mem_bw * max(0.0, stream.draw(noise))
        case CheckKind.PING:
            ports = [(u, v) for nic in topo.nics(node) for u, v, _ in topo.ports(nic)]
            live = sum(topo.edge_live(u, v) for u, v in ports)
            value = live / len(ports) if ports else 0.0
        case CheckKind.IPERF_LIKE:
            value = topo.injection_gbps(node) * max(0.0, stream.draw(noise))
        case CheckKind.DCGM_L3_LIKE:
            value = 0.0 if cluster.has(node, FailureKind.HBM_CORRUPT, FailureKind.GPU_FAIL) else 1.0

    return HealthCheckResult(node, check.kind, now, value, _passed(check.kind, value, config.rules))


# === Alerts ===


@dataclass(frozen=True, slots=True)
class Alert:
    time: float
    node: str
    rule: str
    value: float
    evidence: tuple[float, ...]

    def as_row(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "node": self.node,
            "rule": self.rule,
            "value": self.value,
            "evidence": ";".join(f"{v:.4g}" for v in self.evidence),
        }


type MetricHistory = Mapping[tuple[str, CheckKind], Sequence[HealthCheckResult]]


def evaluate_alert_rules(
    rules: Iterable[AlertRule], history: MetricHistory, t: float
) -> list[Alert]:
    """
    Alerts whose window ending at the latest sample (at or before ``t``)
    violates while the window one sample earlier did not.
    """
    alerts = []
    for rule in rules:
        for (node, kind), results in sorted(history.items()):
            if kind is not rule.check:
                continue
            values = [r.value for r in results if r.time <= t and r.value is not None]
            if len(values) < rule.window:
                continue
            window = values[-rule.window :]
            if not rule.violated(window):
                continue
            previous = values[-rule.window - 1 : -1]
            if len(previous) == rule.window and rule.violated(previous):
                continue
            latest = max(r.time for r in results if r.time <= t)
            alerts.append(Alert(latest, node, rule.name, sum(window) / len(window), tuple(window)))
    return sorted(alerts, key=lambda a: (a.time, a.node, a.rule))


# === Detection latency ===


def _fixed_latency(event: FailureEvent, config: MonitoringConfig) -> float | None:
    if event.failure_class is FailureClass.HARD_CRASH:
        return config.hard_crash_latency
    if event.kind is FailureKind.CUDA_ALLOC_ERR:
        return config.log_alert_latency
    return None


def reactive_latency(event: FailureEvent, config: MonitoringConfig, stream: RngStream) -> float:
    """Time for a person to notice a slow or misbehaving job."""
    fixed = _fixed_latency(event, config)
    if fixed is not None:
        return fixed
    person = LogNormal(config.reactive_mean, config.reactive_sigma)
    return stream.child(f"reactive/{event.id}").draw(person)


def structural_latency(event: FailureEvent, config: MonitoringConfig, stream: RngStream) -> float:
    """Time until the fastest rule that reveals ``event`` fires, given sweep timing."""
    checks = config.checks()
    phase_stream = stream.child(f"phase/{event.id}")
    best = math.inf
    phase_fraction = phase_stream.draw(Uniform(0.0, 1.0))
    for rule in config.rules:
        if event.kind not in rule.reveals:
            continue
        period = checks[rule.check].period
        best = min(best, phase_fraction * period + (rule.window - 1) * period)
    return best


def detection_latency(
    event: FailureEvent,
    posture: Posture | str,
    config: MonitoringConfig | None = None,
    stream: RngStream | None = None,
) -> float:
    """
    Latency from onset to detection; sets ``event.detected_at``.

    Proactive detection is never slower than reactive for the same event
    and stream: it is the earlier of the rule firing and a person noticing.
    """
    config = config or MonitoringConfig()
    stream = stream or RngStream("detection", 0)
    reactive = reactive_latency(event, config, stream)
    latency = reactive
    if Posture(posture) is Posture.PROACTIVE and _fixed_latency(event, config) is None:
        latency = min(reactive, structural_latency(event, config, stream))
    event.detected_at = event.onset + latency
    return latency


# === Metric store ===


RAW_RETENTION = 30 * DAY
MEDIUM_RETENTION = 90 * DAY
LONG_RETENTION = 365 * DAY
TIERS = (300.0, HOUR)

type SeriesKey = tuple[str, str]


@dataclass
class MetricStore:
    """
    Append-only metric store with raw samples plus 5-minute and hourly
    sum/count rollups. Queries return the finest tier still retained for
    the age of the window start.
    """

    raw: dict[SeriesKey, list[tuple[float, float]]] = field(
        default_factory=lambda: defaultdict(list)
    )
    rollups: dict[float, dict[SeriesKey, dict[int, list[float]]]] = field(
        default_factory=lambda: {res: defaultdict(dict) for res in TIERS}
    )

    def add(self, t: float, source: str, name: str, value: float) -> None:
        key = (source, name)
        self.raw[key].append((t, value))
        for res, series in self.rollups.items():
            bucket = series[key].setdefault(int(t // res), [0.0, 0])
            bucket[0] += value
            bucket[1] += 1

    @staticmethod
    def tier_for(age: float) -> float | None:
        """0 for raw, else the rollup resolution in seconds; None when expired."""
        if age <= RAW_RETENTION:
            return 0.0
        if age <= MEDIUM_RETENTION:
            return TIERS[0]
        if age <= LONG_RETENTION:
            return TIERS[1]
        return None

    def series(
        self, source: str, name: str, start: float, end: float, resolution: float = 0.0
    ) -> list[tuple[float, float]]:
        key = (source, name)
        if resolution == 0.0:
            return [(t, v) for t, v in self.raw.get(key, []) if start <= t < end]
        buckets = self.rollups[resolution].get(key, {})
        return [
            (index * resolution, total / count)
            for index, (total, count) in sorted(buckets.items())
            if start <= index * resolution < end and count
        ]

    def query(
        self, source: str, name: str, start: float, end: float, now: float
    ) -> tuple[float | None, list[tuple[float, float]]]:
        resolution = self.tier_for(now - start)
        if resolution is None:
            return None, []
        return resolution, self.series(source, name, start, end, resolution)

    def mean(
        self, source: str, name: str, start: float, end: float, resolution: float = 0.0
    ) -> float:
        key = (source, name)
        if resolution == 0.0:
            values = [v for t, v in self.raw.get(key, []) if start <= t < end]
            return sum(values) / len(values) if values else math.nan
        total = count = 0.0
        for index, (s, c) in self.rollups[resolution].get(key, {}).items():
            if start <= index * resolution < end:
                total += s
                count += c
        return total / count if count else math.nan

    def expire(self, now: float) -> None:
        for key, samples in self.raw.items():
            cut = bisect_left(samples, (now - RAW_RETENTION,))
            if cut:
                del samples[:cut]
        limits = {TIERS[0]: MEDIUM_RETENTION, TIERS[1]: LONG_RETENTION}
        for res, series in self.rollups.items():
            for buckets in series.values():
                # buckets are inserted in time order
                while buckets and now - next(iter(buckets)) * res > limits[res]:
                    del buckets[next(iter(buckets))]

    def rows(self, resolution: float = 0.0) -> list[dict[str, Any]]:
        if resolution == 0.0:
            return [
                {"time": t, "source": s, "name": n, "value": v}
                for (s, n), samples in sorted(self.raw.items())
                for t, v in samples
            ]
        return [
            {"time": i * resolution, "source": s, "name": n, "value": total / count}
            for (s, n), buckets in sorted(self.rollups[resolution].items())
            for i, (total, count) in sorted(buckets.items())
        ]


def export_metrics(
    samples: Iterable[HealthCheckResult], t: float, store: MetricStore | None = None
) -> MetricStore:
    store = store if store is not None else MetricStore()
    for sample in samples:
        if sample.value is not None:
            store.add(sample.time, sample.node, str(sample.kind), sample.value)
    store.expire(t)
    return store


# === Run-time monitor ===


class Monitor:
    """
    Runs health-check sweeps, evaluates alert rules on new samples and
    maps alerts to the active faults they reveal.
    """

    def __init__(
        self,
        config: MonitoringConfig,
        cluster: ClusterHealth,
        stream: RngStream,
        is_busy: Callable[[str], bool] = lambda node: False,
        reserve: Callable[[str, float, float], bool] = lambda node, start, end: True,
    ) -> None:
        self.config = config
        self.cluster = cluster
        self.stream = stream
        self.is_busy = is_busy
        self.reserve = reserve
        self.checks = config.checks()
        depth = max((r.window for r in config.rules), default=1) + 1
        self.history: dict[tuple[str, CheckKind], deque[HealthCheckResult]] = defaultdict(
            lambda: deque(maxlen=depth)
        )
        self.store = MetricStore()
        self.alerts: list[Alert] = []
        self.unmatched: list[Alert] = []
        self.intrusive_runs: list[tuple[str, float, float, bool]] = []
        self._last_intrusive: dict[str, float] = {}

    def sweep(self, now: float, skip: Iterable[str] = ()) -> list[tuple[Alert, list[FailureEvent]]]:
        """
        One pass over every node. Returns each fired alert with the active,
        undetected faults it reveals.
        """
        skipped = set(skip)
        fired: list[tuple[Alert, list[FailureEvent]]] = []
        for node in self.cluster.topo.hosts:
            if node in skipped or self.cluster.is_down(node):
                continue
            busy = self.is_busy(node)
            results = []
            for check in self.checks.values():
                if check.intrusive:
                    due = now - self._last_intrusive.get(node, -math.inf) >= check.period
                    end = now + check.runtime
                    if busy or not due or not self.reserve(node, now, end):
                        continue
                    self._last_intrusive[node] = now
                    self.intrusive_runs.append((node, now, end, busy))
                result = run_health_check(
                    node, check, self.cluster, now, self.stream, busy=busy, config=self.config
                )
                self.history[(node, check.kind)].append(result)
                results.append(result)
            for result in results:
                if result.value is not None:
                    self.store.add(now, node, str(result.kind), result.value)
            node_history = {
                (node, kind): self.history[(node, kind)]
                for kind in self.checks
                if (node, kind) in self.history
            }
            for alert in evaluate_alert_rules(self.config.rules, node_history, now):
                if alert.time != now:
                    continue
                fired.append((alert, self._revealed(alert)))
        self.store.expire(now)
        return fired

    def _revealed(self, alert: Alert) -> list[FailureEvent]:
        rule = next(r for r in self.config.rules if r.name == alert.rule)
        revealed = [
            e for e in self.cluster.active_on(alert.node)
            if e.kind in rule.reveals and e.detected_at is None
        ]
        self.alerts.append(alert)
        if not revealed:
            self.unmatched.append(alert)
        log.info(
            "alert_fired",
            node=alert.node,
            rule=alert.rule,
            value=alert.value,
            revealed=[e.id for e in revealed],
            sim_time=alert.time,
        )
        return revealed

    def sample_telemetry(
        self, now: float, power: PowerSystem, cls: Literal["gpu", "system"]
    ) -> None:
        for node in self.cluster.topo.hosts:
            if cls == "gpu":
                spec = self.cluster.topo.node_spec
                if self.cluster.is_down(node):
                    watts = 0.0
                elif power.is_braked(node):
                    watts = spec.gpu_power_min
                else:
                    watts = spec.gpu_power_max if self.is_busy(node) else spec.gpu_power_min / 2
                self.store.add(now, node, "gpu_power_w", watts)
            else:
                self.store.add(now, node, "node_busy", 1.0 if self.is_busy(node) else 0.0)


class MonitoringExtension(BaseExtension):
    """
    Wires detection into a run.

    Every applied fault gets a reactive timer. In the proactive posture,
    hourly sweeps run as well and the first of the two to fire publishes
    ``fault_detected``. Hard crashes and CUDA log errors are seen by the
    platform after a short fixed latency in both postures.
    """

    def startup(self, registry: svcs.Registry, sim: Simulation) -> dict[str, Any]:
        config: MonitoringConfig = sim.scenario.monitoring
        self.config = config

        def factory(svcs_container: svcs.Container) -> Monitor:
            return Monitor(config, svcs_container.get(ClusterHealth), sim.stream("monitoring"))

        def ping(monitor: Monitor) -> None:
            for node, t, _end, busy in monitor.intrusive_runs:
                assert not busy, f"intrusive check ran on busy node {node} at {t}"

        registry.register_factory(Monitor, factory, ping=ping)

        if config.posture is Posture.PROACTIVE:
            sim.engine.schedule(config.check_period, "health_sweep")
            sim.engine.on("health_sweep", lambda e: self._on_sweep(sim, e))
        if config.telemetry.enabled:
            sim.engine.schedule(0.0, "telemetry", "gpu")
            sim.engine.schedule(0.0, "telemetry", "system")
            sim.engine.on("telemetry", lambda e: self._on_telemetry(sim, e))

        sim.subscribe("fault_applied", lambda event: self._arm_reactive(sim, event))
        sim.engine.on("reactive_detect", lambda e: self._detect(sim, e.payload, e.time, "reactive"))
        return {}

    def _arm_reactive(self, sim: Simulation, event: FailureEvent) -> None:
        latency = reactive_latency(event, self.config, sim.stream("detection"))
        sim.engine.schedule(event.onset + latency, "reactive_detect", event.target, event)

    def _detect(self, sim: Simulation, event: FailureEvent, t: float, source: str) -> None:
        if not event.active or not event.mark_detected(t):
            return
        log.info(
            "fault_detected",
            fault=event.id,
            kind=str(event.kind),
            target=event.target,
            lag=event.detected_at - event.onset if event.detected_at is not None else None,
            source=source,
            sim_time=t,
        )
        sim.publish("fault_detected", event=event)

    def _on_sweep(self, sim: Simulation, record: EventRecord) -> None:
        monitor = sim.get(Monitor)
        for _alert, revealed in monitor.sweep(record.time):
            for event in revealed:
                self._detect(sim, event, record.time, "alert")
        if record.time + self.config.check_period <= sim.horizon:
            sim.engine.schedule(record.time + self.config.check_period, "health_sweep")

    def _on_telemetry(self, sim: Simulation, record: EventRecord) -> None:
        cls: Literal["gpu", "system"] = "gpu" if record.target == "gpu" else "system"
        sim.get(Monitor).sample_telemetry(record.time, sim.get(PowerSystem), cls)
        telemetry = self.config.telemetry
        period = telemetry.gpu_period if cls == "gpu" else telemetry.system_period
        if record.time + period <= sim.horizon:
            sim.engine.schedule(record.time + period, "telemetry", record.target)

    def report(self, sim: Simulation) -> dict[str, list[dict[str, Any]]]:
        monitor = sim.get(Monitor)
        return {
            "alerts": [a.as_row() for a in monitor.alerts],
            "metrics_raw": monitor.store.rows(0.0),
            "metrics_5m": monitor.store.rows(TIERS[0]),
            "metrics_1h": monitor.store.rows(TIERS[1]),
        }

    def summary(self, sim: Simulation) -> dict[str, Any]:
        monitor = sim.get(Monitor)
        return {
            "posture": str(self.config.posture),
            "alerts": len(monitor.alerts),
            "false_positives": len(monitor.unmatched),
            "intrusive_checks": len(monitor.intrusive_runs),
        }

