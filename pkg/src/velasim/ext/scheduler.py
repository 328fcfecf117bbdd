"""
Cluster scheduler.

Gang-schedules jobs onto whole nodes in FIFO order (priority first, no
backfill), tracks each node's status and drives the crash, restart and
drain pipeline in response to faults, power events and alerts.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Any

import structlog
import svcs
from pydantic import BaseModel, ConfigDict, Field

from ..core.engine import EventRecord, Engine, RngStream
from ..core.exceptions import InsufficientNodes, InvalidSpec, PoolExhausted
from ..core.extensions import BaseExtension
from .collectives import GB
from .faults import HARD_CRASH_KINDS, ClusterHealth, Effect, FailureEvent, FaultsConfig
from .monitoring import Monitor
from .network import Network
from .power import PowerSystem, ServerLoad
from .resilience import (
    DEFAULT_NODE_CRASH_RATE,
    BufferPool,
    CheckpointConfig,
    CheckpointPolicy,
    PoolConfig,
    ResilienceLog,
    StorageBackend,
    checkpoint,
    checkpoint_key,
    job_mtbf,
    restart_job,
)
from .topology import ClusterTopology
from .workload import (
    CheckpointRecord,
    ClusterView,
    JobPhase,
    JobSpec,
    JobState,
    plan_parallelism,
    step_time,
    throughput_report,
)

if TYPE_CHECKING:
    from ..core.application import Simulation

log = structlog.stdlib.get_logger("velasim.scheduler")

RUNNING_PHASES = frozenset({JobPhase.LOADING, JobPhase.STEPPING, JobPhase.CHECKPOINTING})
HEALTH_CHECK = "health_check"


class NodeState(StrEnum):
    OPEN = "open"
    CLOSED = "closed"
    BRAKED = "braked"
    DOWN = "down"
    RESERVED_BUFFER = "reserved_buffer"


@dataclass
class NodeStatus:
    node: str
    state: NodeState = NodeState.OPEN
    reason: str = ""
    job: str | None = None


@dataclass
class ClusterQueue:
    """Every submitted job is in exactly one of the four collections."""

    pending: list[JobState] = field(default_factory=list)
    running: dict[str, JobState] = field(default_factory=dict)
    completed: list[JobState] = field(default_factory=list)
    failed: list[JobState] = field(default_factory=list)
    submitted: int = 0

    def enqueue(self, job: JobState) -> None:
        """Insert behind every job of equal or higher priority."""
        index = len(self.pending)
        for k, other in enumerate(self.pending):
            if other.spec.priority < job.spec.priority:
                index = k
                break
        self.pending.insert(index, job)
        self.submitted += 1

    @property
    def conserved(self) -> bool:
        total = len(self.pending) + len(self.running) + len(self.completed) + len(self.failed)
        return total == self.submitted

    def all_jobs(self) -> list[JobState]:
        jobs = [*self.pending, *self.running.values(), *self.completed, *self.failed]
        return sorted(jobs, key=lambda j: j.id)


class SchedulerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    proactive_drain: bool = True
    max_restarts: int | None = Field(default=None, ge=0)


@dataclass
class _RestartContext:
    crashed_at: float
    detect: float | None = None
    waiting_since: float | None = None
    tainted: set[str] = field(default_factory=set)


class Scheduler:
    """
    Owns node statuses, the job queue and every job's lifecycle timers.

    Subsystems report into it through the ``on_*`` methods; it answers with
    engine events keyed by job id (``checkpoint_due``, ``checkpoint_done``,
    ``job_complete``, ``job_restart``, ``job_loaded``, ``escalation``).
    """

    def __init__(
        self,
        engine: Engine,
        topo: ClusterTopology,
        network: Network,
        power: PowerSystem,
        health: ClusterHealth,
        backend: StorageBackend,
        pool: BufferPool,
        record: ResilienceLog,
        *,
        checkpoint_config: CheckpointConfig | None = None,
        pool_config: PoolConfig | None = None,
        faults_config: FaultsConfig | None = None,
        config: SchedulerConfig | None = None,
        crash_latency: float = 300.0,
        stream: RngStream | None = None,
        publish: Callable[..., None] = lambda topic, **payload: None,
    ) -> None:
        self.engine = engine
        self.topo = topo
        self.network = network
        self.power = power
        self.health = health
        self.backend = backend
        self.pool = pool
        self.record = record
        self.checkpoint_config = checkpoint_config or CheckpointConfig()
        self.pool_config = pool_config or PoolConfig()
        self.faults_config = faults_config or FaultsConfig()
        self.config = config or SchedulerConfig()
        self.crash_latency = crash_latency
        self.stream = stream or RngStream("escalation", 0)
        self.publish = publish

        self.nodes = {host: NodeStatus(host) for host in topo.hosts}
        self.queue = ClusterQueue()
        self.jobs: dict[str, JobState] = {}
        self.policies: dict[str, CheckpointPolicy] = {}
        self.status_log: list[dict[str, Any]] = []
        self.queue_log: list[dict[str, Any]] = []
        self.violations: list[str] = []
        self.planned_restarts = 0
        self._closed_by: dict[str, set[str]] = {}
        self._checking: dict[str, float] = {}
        self._awaiting_repair: dict[str, list[FailureEvent]] = {}
        self._power_down: set[str] = set()
        self._restarts: dict[str, _RestartContext] = {}
        self._waiting: list[str] = []
        self._escalation_streams: dict[str, RngStream] = {}

    # --- queries ---

    def job_on(self, node: str) -> JobState | None:
        status = self.nodes.get(node)
        if status is None or status.job is None:
            return None
        return self.jobs[status.job]

    def is_busy(self, node: str) -> bool:
        job = self.job_on(node)
        return job is not None and job.phase in RUNNING_PHASES

    def is_node_down(self, node: str) -> bool:
        return self.health.is_down(node) or node in self._power_down

    def _unavailable(self, node: str) -> bool:
        return self.is_node_down(node) or bool(self._closed_by.get(node))

    def _idle_state(self, node: str) -> NodeState:
        return NodeState.BRAKED if self.power.is_braked(node) else NodeState.OPEN

    def free_nodes(self) -> list[str]:
        return [
            n for n, s in self.nodes.items() if s.state is NodeState.OPEN and s.job is None
        ]

    # --- node status ---

    def _set_state(self, node: str, state: NodeState, reason: str, now: float) -> None:
        status = self.nodes[node]
        if status.state is state and status.reason == reason:
            return
        if state in (NodeState.DOWN, NodeState.CLOSED) and self.is_busy(node):
            self.violations.append(f"{node} set {state} under running job {status.job} at {now}")
        status.state, status.reason = state, reason
        self.status_log.append(
            {
                "time": now,
                "node": node,
                "state": str(state),
                "reason": reason,
                "job": status.job or "",
            }
        )
        log.debug("node_status", node=node, state=str(state), reason=reason, sim_time=now)

    def _log_queue(self, now: float) -> None:
        row = {
            "time": now,
            "pending": len(self.queue.pending),
            "running": len(self.queue.running),
            "completed": len(self.queue.completed),
            "failed": len(self.queue.failed),
        }
        last = self.queue_log[-1] if self.queue_log else None
        if last is not None and all(last[k] == v for k, v in row.items() if k != "time"):
            return
        self.queue_log.append(row)

    def _free(self, node: str, now: float) -> None:
        """Return an idle, healthy node to the buffer pool or the open queue."""
        if self.pool.deficit and node not in self.pool.available:
            self.pool.put(node)
            self._set_state(node, NodeState.RESERVED_BUFFER, "buffer", now)
        else:
            self._set_state(node, self._idle_state(node), "", now)

    def _close(self, node: str, reason: str, now: float) -> None:
        self.pool.discard(node)
        if self.nodes[node].state is not NodeState.DOWN:
            self._set_state(node, NodeState.CLOSED, reason, now)
        self._start_repairs(node, now)

    def _start_repairs(self, node: str, now: float) -> None:
        for event in self._awaiting_repair.pop(node, []):
            log.info("node_repair_started", node=node, fault=event.id, sim_time=now)
            self.publish("repair_ready", event=event)

    # --- intrusive health checks ---

    def reserve_for_check(self, node: str, start: float, end: float) -> bool:
        """Close an idle node for an intrusive check that runs until ``end``."""
        status = self.nodes[node]
        if status.job is not None or self._unavailable(node) or status.state is NodeState.DOWN:
            return False
        self._checking[node] = end
        self._closed_by.setdefault(node, set()).add(HEALTH_CHECK)
        self._close(node, HEALTH_CHECK, start)
        self.engine.schedule(end, "check_done", node, end)
        return True

    def under_check(self, node: str) -> bool:
        return node in self._checking

    def on_check_done(self, record: EventRecord) -> None:
        node = record.target
        if self._checking.get(node) != record.payload:
            return
        del self._checking[node]
        self._closed_by[node].discard(HEALTH_CHECK)
        self._maybe_return(node, record.time)

    def fill_pool(self, now: float) -> None:
        for node in sorted(self.free_nodes(), reverse=True):
            if not self.pool.deficit:
                break
            self._free(node, now)
        log.info("buffer_pool_filled", size=len(self.pool.available), target=self.pool.target)

    def _set_loads(self, nodes: tuple[str, ...], load: ServerLoad, now: float) -> None:
        for node in nodes:
            if not self.is_node_down(node):
                self.power.set_load(node, load, now)

    # --- timers ---

    def _set_timer(
        self, job: JobState, name: str, time: float, kind: str, payload: Any = None
    ) -> None:
        self._cancel(job, name)
        job.timers[name] = self.engine.schedule(time, kind, job.id, payload)

    def _cancel(self, job: JobState, prefix: str = "") -> None:
        for name in [k for k in job.timers if k.startswith(prefix)]:
            self.engine.cancel(job.timers.pop(name))

    def _fired(self, record: EventRecord, name: str) -> JobState | None:
        job = self.jobs.get(record.target)
        if job is None or job.timers.get(name) != record.sequence:
            return None
        del job.timers[name]
        return job

    # --- submission and admission ---

    def submit(self, spec: JobSpec, now: float) -> str:
        """Queue ``spec`` and try to place it straight away."""
        spec.check(self.topo.node_spec)
        needed = spec.nodes_needed(self.topo.node_spec)
        if needed > len(self.topo.hosts):
            raise InvalidSpec(
                f"{spec.name} needs {needed} nodes, cluster has {len(self.topo.hosts)}",
                details={"needed": needed, "hosts": len(self.topo.hosts)},
            )
        job = JobState(id=f"j{len(self.jobs):03d}", spec=spec, submitted_at=now)
        self.jobs[job.id] = job
        self.record.jobs.append(job)
        self.queue.enqueue(job)
        log.info("job_submitted", job=job.id, name=spec.name, gpus=spec.gpu_count, sim_time=now)
        self.admit(now)
        self._log_queue(now)
        return job.id

    def admit(self, now: float) -> None:
        """Start pending jobs in order until the head of the queue does not fit."""
        while self.queue.pending:
            job = self.queue.pending[0]
            try:
                placement = plan_parallelism(job.spec, self.topo, self.free_nodes())
            except InsufficientNodes:
                break
            self.queue.pending.pop(0)
            self.queue.running[job.id] = job
            job.placement = placement
            job.started_at = now
            for node in placement.nodes:
                self.nodes[node].job = job.id
            self.policies[job.id] = self._policy(job)
            self._set_loads(placement.nodes, "busy", now)
            job.enter(JobPhase.STEPPING, now)
            log.info("job_started", job=job.id, nodes=len(placement.nodes), sim_time=now)
            self._begin_stepping(job, now)
        self._log_queue(now)

    def _policy(self, job: JobState) -> CheckpointPolicy:
        delta = job.spec.checkpoint_state_size / (self.backend.write_bw * GB)
        config = self.checkpoint_config
        if config.mtbf is not None:
            mtbf = config.mtbf
        else:
            rates = self.faults_config.resolved_rates()
            rate = sum(rates[k] for k in HARD_CRASH_KINDS) or DEFAULT_NODE_CRASH_RATE
            mtbf = job_mtbf(len(job.nodes), rate)
        return CheckpointPolicy.from_config(config, delta, mtbf)

    def _begin_stepping(self, job: JobState, now: float) -> None:
        policy = self.policies[job.id]
        self._set_timer(job, "ckpt_due", now + policy.interval, "checkpoint_due")
        self.refresh(job, now)

    # --- step time ---

    def view(self, job: JobState) -> ClusterView:
        return ClusterView(
            network=self.network,
            slowdown=self.power.slowdown,
            is_down=self.is_node_down,
            storage_multiplier=self.backend.mean_step_multiplier(job.steps_processed),
            mode=self.network.config.mode,
        )

    def refresh(self, job: JobState, now: float) -> None:
        """Recompute a stepping job's step time and re-arm its completion and escalation timers."""
        if job.phase is not JobPhase.STEPPING:
            return
        if any(self.is_node_down(n) for n in job.nodes):
            return
        job.set_step_time(step_time(job, self.view(job)), now)
        remaining = job.remaining_steps
        if math.isfinite(remaining):
            self._set_timer(job, "complete", now + remaining * job.step_time, "job_complete")
        self._arm_escalations(job, now)

    def _arm_escalations(self, job: JobState, now: float) -> None:
        # Steps to escalation are geometric, so redrawing on every re-arm keeps the law.
        self._cancel(job, "esc/")
        for node in job.nodes:
            for event in self.health.active_on(node):
                if event.effect is not Effect.ESCALATION or event.magnitude <= 0:
                    continue
                stream = self._escalation_streams.setdefault(event.id, self.stream.child(event.id))
                steps = stream.geometric(event.magnitude)
                self._set_timer(
                    job, f"esc/{event.id}", now + steps * job.step_time, "escalation", event
                )

    def refresh_nodes(self, nodes: list[str], now: float) -> None:
        seen: set[str] = set()
        for node in nodes:
            job = self.job_on(node)
            if job is not None and job.id not in seen:
                seen.add(job.id)
                self.refresh(job, now)

    def refresh_all(self, now: float) -> None:
        for job in list(self.queue.running.values()):
            self.refresh(job, now)

    # --- lifecycle events ---

    def on_checkpoint_due(self, record: EventRecord) -> None:
        job = self._fired(record, "ckpt_due")
        if job is None or job.phase is not JobPhase.STEPPING:
            return
        now = record.time
        self._cancel(job, "complete")
        self._cancel(job, "esc/")
        result = checkpoint(job, self.backend, now)
        self._set_timer(job, "ckpt_done", now + result.duration, "checkpoint_done", (now, result))
        if result.flush_at is not None:
            self.engine.schedule(result.flush_at, "flush_done", checkpoint_key(job, now))

    def on_checkpoint_done(self, record: EventRecord) -> None:
        job = self._fired(record, "ckpt_done")
        if job is None or job.phase is not JobPhase.CHECKPOINTING:
            return
        now = record.time
        started, result = record.payload
        job.settle(now)
        tainted = tuple(e.id for e in self.health.corrupting(job.nodes))
        job.checkpoints.append(
            CheckpointRecord(
                time=started,
                steps=job.steps_done,
                cum_productive=job.cum_productive,
                tainted_by=tainted,
            )
        )
        policy = self.policies[job.id]
        policy.observe(result.duration)
        self.record.checkpoints.append(
            {
                "time": started,
                "job": job.id,
                "duration": result.duration,
                "steps": job.steps_done,
                "interval": policy.interval,
                "evicted": len(result.evicted),
                "tainted": ";".join(tainted),
            }
        )
        log.debug("checkpoint_written", job=job.id, duration=result.duration, sim_time=now)
        job.enter(JobPhase.STEPPING, now)
        if job.drain and self.checkpoint_config.drain_on_checkpoint:
            self.planned_restarts += 1
            log.info("job_drained", job=job.id, nodes=sorted(job.drain), sim_time=now)
            self._restarts[job.id] = _RestartContext(crashed_at=now, detect=0.0)
            job.enter(JobPhase.CRASHED, now)
            self.restart(job, now)
            return
        self._begin_stepping(job, now)

    def on_complete(self, record: EventRecord) -> None:
        job = self._fired(record, "complete")
        if job is None or job.phase is not JobPhase.STEPPING:
            return
        now = record.time
        job.settle(now)
        if job.remaining_steps > 1e-6:
            self.refresh(job, now)
            return
        self._cancel(job)
        job.enter(JobPhase.COMPLETED, now)
        job.completed_at = now
        del self.queue.running[job.id]
        self.queue.completed.append(job)
        log.info("job_completed", job=job.id, steps=job.steps_done, sim_time=now)
        self._release(job, now)

    def _release(self, job: JobState, now: float) -> None:
        self._set_loads(job.nodes, "idle", now)
        for node in job.nodes:
            self.nodes[node].job = None
            if node in job.drain or self._closed_by.get(node):
                self._close(node, "drained", now)
            elif self.nodes[node].state is not NodeState.DOWN:
                self._free(node, now)
        job.drain.clear()
        self.admit(now)
        self._retry_waiting(now)
        self._log_queue(now)

    # --- crash and restart ---

    def crash(
        self,
        job: JobState,
        now: float,
        reason: str,
        *,
        delay: float | None = None,
        tainted: tuple[str, ...] = (),
    ) -> None:
        """
        Stop a job and schedule its restart after ``delay`` (the crash
        detection latency by default). Crashing a job that is already down
        only adds to its taint set.
        """
        if job.phase in (JobPhase.PENDING, JobPhase.COMPLETED):
            return
        context = self._restarts.setdefault(job.id, _RestartContext(crashed_at=now))
        context.tainted.update(tainted)
        if job.phase in (JobPhase.CRASHED, JobPhase.RESTARTING):
            return
        self._cancel(job)
        job.enter(JobPhase.CRASHED, now)
        self._set_loads(job.nodes, "idle", now)
        for node in job.nodes:
            self._start_repairs(node, now)
        log.info("job_crashed", job=job.id, reason=reason, sim_time=now)
        wait = self.crash_latency if delay is None else delay
        self._set_timer(job, "restart", now + wait, "job_restart")

    def on_restart(self, record: EventRecord) -> None:
        job = self._fired(record, "restart")
        if job is not None and job.phase is JobPhase.CRASHED:
            self.restart(job, record.time)

    def restart(self, job: JobState, now: float) -> None:
        context = self._restarts[job.id]
        if context.detect is None:
            context.detect = now - context.crashed_at
        limit = self.config.max_restarts
        if limit is not None and len(job.restarts) >= limit:
            self._fail(job, now)
            return
        failed = [
            n for n in job.nodes
            if n in job.drain or self._unavailable(n)
            or self.nodes[n].state in (NodeState.DOWN, NodeState.CLOSED)
        ]
        waited = 0.0 if context.waiting_since is None else now - context.waiting_since
        try:
            timeline, mapping = restart_job(
                job,
                self.pool,
                self.backend,
                context.detect,
                failed,
                now,
                spares=self.free_nodes(),
                reschedule=self.pool_config.reschedule_time + waited,
                tainted=tuple(sorted(context.tainted)),
            )
        except PoolExhausted:
            job.enter(JobPhase.RESTARTING, now)
            if context.waiting_since is None:
                context.waiting_since = now
            if job.id not in self._waiting:
                self._waiting.append(job.id)
            log.warning("job_waiting_for_nodes", job=job.id, failed=failed, sim_time=now)
            return
        del self._restarts[job.id]
        if job.id in self._waiting:
            self._waiting.remove(job.id)
        for old, new in mapping.items():
            self.nodes[old].job = None
            reason = job.drain.pop(old, None)
            if reason is not None or self._closed_by.get(old):
                self._close(old, "drained", now)
            elif not self.is_node_down(old) and self.nodes[old].state is not NodeState.DOWN:
                self._free(old, now)
            self.nodes[new].job = job.id
            self._set_state(new, self._idle_state(new), "", now)
        self._set_loads(job.nodes, "busy", now)
        self.record.restarts.append(
            {
                "time": now,
                "job": job.id,
                "detect": timeline.detect,
                "reschedule": timeline.reschedule,
                "reload": timeline.reload,
                "recompute": timeline.recompute,
                "replaced": ";".join(f"{a}>{b}" for a, b in sorted(mapping.items())),
            }
        )
        loaded_at = now + timeline.reschedule + timeline.reload
        self._set_timer(job, "loaded", loaded_at, "job_loaded")

    def _fail(self, job: JobState, now: float) -> None:
        self._restarts.pop(job.id, None)
        if job.id in self._waiting:
            self._waiting.remove(job.id)
        self._cancel(job)
        job.enter(JobPhase.COMPLETED, now)
        del self.queue.running[job.id]
        self.queue.failed.append(job)
        log.warning("job_failed", job=job.id, restarts=len(job.restarts), sim_time=now)
        self._release(job, now)

    def on_loaded(self, record: EventRecord) -> None:
        job = self._fired(record, "loaded")
        if job is None or job.phase is not JobPhase.LOADING:
            return
        if any(self._unavailable(n) for n in job.nodes):
            self.crash(job, record.time, "node_lost_during_load")
            return
        job.enter(JobPhase.STEPPING, record.time)
        self._begin_stepping(job, record.time)

    def _retry_waiting(self, now: float) -> None:
        for job_id in list(self._waiting):
            job = self.jobs[job_id]
            if job.phase is not JobPhase.RESTARTING:
                self._waiting.remove(job_id)
                continue
            job.enter(JobPhase.CRASHED, now)
            self.restart(job, now)

    def on_escalation(self, record: EventRecord) -> None:
        job = self.jobs.get(record.target)
        name = f"esc/{record.payload.id}"
        if job is None or job.timers.get(name) != record.sequence:
            return
        del job.timers[name]
        event: FailureEvent = record.payload
        if not event.active or job.phase is not JobPhase.STEPPING:
            return
        now = record.time
        log.info(
            "fault_escalated", fault=event.id, kind=str(event.kind), node=event.target, sim_time=now
        )
        self.crash(job, now, f"escalation:{event.kind}")
        if event.mark_detected(now):
            self.publish("fault_detected", event=event)

    # --- subsystem notifications ---

    def on_node_health(self, change: str, event: FailureEvent, now: float) -> None:
        node = event.target
        match change:
            case "down":
                self._node_down(node, str(event.kind), now)
            case "degraded":
                self.refresh_nodes([node], now)
            case "up" | "restored":
                self._closed_by.get(node, set()).discard(event.id)
                self.refresh_nodes([node], now)
                self._maybe_return(node, now)

    def on_fault_detected(self, event: FailureEvent, now: float) -> None:
        node = event.target
        self._closed_by.setdefault(node, set()).add(event.id)
        if event.effect is Effect.NODE_DOWN:
            self.publish("repair_ready", event=event)
            return
        # Repair starts once the node leaves service.
        self._awaiting_repair.setdefault(node, []).append(event)
        job = self.job_on(node)
        reason = str(event.kind)
        if job is not None and event.effect is Effect.SILENT_CORRUPTION:
            tainted = tuple(e.id for e in self.health.corrupting(job.nodes))
            self.crash(job, now, f"corruption:{event.id}", delay=0.0, tainted=(*tainted, event.id))
            self._close(node, reason, now)
        elif job is None or job.phase not in RUNNING_PHASES:
            self._close(node, reason, now)
        elif self.config.proactive_drain:
            job.drain[node] = event.id
            self.nodes[node].reason = f"drain:{reason}"
            log.info("node_drain_scheduled", node=node, job=job.id, fault=event.id, sim_time=now)

    def on_power_changed(self, kind: str, nodes: list[str], now: float) -> None:
        match kind:
            case "down":
                self._power_down.update(nodes)
                for node in nodes:
                    self._node_down(node, "power", now)
            case "up":
                self._power_down.difference_update(nodes)
                for node in nodes:
                    self._maybe_return(node, now)
            case "slowdown":
                for node in nodes:
                    status = self.nodes[node]
                    if status.state in (NodeState.OPEN, NodeState.BRAKED):
                        self._set_state(node, self._idle_state(node), "power", now)
                self.refresh_nodes(nodes, now)

    def _node_down(self, node: str, reason: str, now: float) -> None:
        job = self.job_on(node)
        if job is not None:
            self.crash(job, now, f"node_down:{node}")
        self.pool.discard(node)
        self._set_state(node, NodeState.DOWN, reason, now)

    def _maybe_return(self, node: str, now: float) -> None:
        if self._unavailable(node):
            return
        status = self.nodes[node]
        if status.job is not None:
            if status.state in (NodeState.DOWN, NodeState.CLOSED):
                self._set_state(node, self._idle_state(node), "repaired", now)
        elif status.state in (NodeState.DOWN, NodeState.CLOSED):
            self._free(node, now)
        self.admit(now)
        self._retry_waiting(now)

    # --- end of run ---

    def settle(self, now: float) -> None:
        for job in self.jobs.values():
            if job.phase is not JobPhase.COMPLETED:
                job.settle(now)

    def job_rows(self, now: float) -> list[dict[str, Any]]:
        rows = []
        for job in self.queue.all_jobs():
            row: dict[str, Any] = {
                "job": job.id,
                "name": job.spec.name,
                "phase": str(job.phase),
                "gpus": job.spec.gpu_count,
                "steps_done": job.steps_done,
                "steps_processed": job.steps_processed,
                "restarts": len(job.restarts),
                **{k: job.ledger[k] for k in sorted(job.ledger)},
                "tokens_per_day": None,
                "tflops_per_gpu": None,
            }
            if job.started_at is not None and job.steps_done >= 1:
                end = job.completed_at if job.completed_at is not None else now
                report = throughput_report(job, job.started_at, end)
                row["tokens_per_day"] = report.tokens_per_day
                row["tflops_per_gpu"] = report.tflops_per_gpu
            rows.append(row)
        return rows


class SchedulerExtension(BaseExtension):
    """
    Registers the :class:`Scheduler` and routes job events, fault
    notifications and power changes to it. Jobs from the scenario are
    submitted at their ``submit_at`` time; the buffer pool is filled right
    after the jobs submitted at time zero are admitted.
    """

    def startup(self, registry: svcs.Registry, sim: Simulation) -> dict[str, Any]:
        scenario = sim.scenario

        def factory(svcs_container: svcs.Container) -> Scheduler:
            scheduler = Scheduler(
                sim.engine,
                svcs_container.get(ClusterTopology),
                svcs_container.get(Network),
                svcs_container.get(PowerSystem),
                svcs_container.get(ClusterHealth),
                svcs_container.get(StorageBackend),
                svcs_container.get(BufferPool),
                svcs_container.get(ResilienceLog),
                checkpoint_config=scenario.checkpoint,
                pool_config=scenario.pool,
                faults_config=scenario.faults,
                config=scenario.scheduler,
                crash_latency=scenario.monitoring.hard_crash_latency,
                stream=sim.stream("escalation"),
                publish=sim.publish,
            )
            monitor = svcs_container.get(Monitor)
            monitor.is_busy = scheduler.is_busy
            monitor.reserve = scheduler.reserve_for_check
            return scheduler

        def ping(scheduler: Scheduler) -> None:
            assert not scheduler.violations, scheduler.violations[0]
            assert scheduler.queue.conserved, "queue lost track of a job"
            node = scheduler.topo.node_spec
            for job in scheduler.queue.running.values():
                if job.placement is not None:
                    assert len(set(job.nodes)) == job.spec.nodes_needed(node), (
                        f"{job.id} placed on {len(set(job.nodes))} nodes"
                    )
            for status in scheduler.nodes.values():
                if status.state in (NodeState.DOWN, NodeState.CLOSED):
                    assert not scheduler.is_busy(status.node), (
                        f"{status.job} running on {status.state} node {status.node}"
                    )
            for node in scheduler.nodes:
                if scheduler.under_check(node):
                    assert scheduler.nodes[node].job is None, (
                        f"{scheduler.nodes[node].job} placed on {node} during a health check"
                    )

        registry.register_factory(Scheduler, factory, ping=ping)

        for spec in scenario.jobs:
            sim.engine.schedule(spec.submit_at, "job_submit", spec.name, spec)
        sim.engine.schedule(0.0, "pool_fill")

        def get() -> Scheduler:
            return sim.get(Scheduler)

        sim.engine.on("job_submit", lambda e: get().submit(e.payload, e.time))
        sim.engine.on("pool_fill", lambda e: get().fill_pool(e.time))
        sim.engine.on("checkpoint_due", lambda e: get().on_checkpoint_due(e))
        sim.engine.on("checkpoint_done", lambda e: get().on_checkpoint_done(e))
        sim.engine.on("job_complete", lambda e: get().on_complete(e))
        sim.engine.on("job_restart", lambda e: get().on_restart(e))
        sim.engine.on("job_loaded", lambda e: get().on_loaded(e))
        sim.engine.on("escalation", lambda e: get().on_escalation(e))
        sim.engine.on("check_done", lambda e: get().on_check_done(e))
        sim.subscribe(
            "node_health", lambda change, event: get().on_node_health(change, event, sim.now)
        )
        sim.subscribe("fault_detected", lambda event: get().on_fault_detected(event, sim.now))
        sim.subscribe(
            "power_changed", lambda kind, nodes: get().on_power_changed(kind, nodes, sim.now)
        )
        sim.subscribe("topology_changed", lambda delta: get().refresh_all(sim.now))
        return {}

    def report(self, sim: Simulation) -> dict[str, list[dict[str, Any]]]:
        scheduler = sim.get(Scheduler)
        scheduler.settle(sim.now)
        steps = [
            {"job": job.id, "time": t, "step_time": value}
            for job in scheduler.queue.all_jobs()
            for t, value in job.step_series
        ]
        return {
            "jobs": scheduler.job_rows(sim.now),
            "step_times": steps,
            "node_status": scheduler.status_log,
            "queue": scheduler.queue_log,
        }

    def summary(self, sim: Simulation) -> dict[str, Any]:
        scheduler = sim.get(Scheduler)
        scheduler.settle(sim.now)
        queue = scheduler.queue
        states: dict[str, int] = {str(s): 0 for s in NodeState}
        for status in scheduler.nodes.values():
            states[str(status.state)] += 1
        out: dict[str, Any] = {
            "submitted": queue.submitted,
            "running": len(queue.running),
            "pending": len(queue.pending),
            "completed": len(queue.completed),
            "failed": len(queue.failed),
            "restarts": sum(len(j.restarts) for j in scheduler.jobs.values()),
            "planned_restarts": scheduler.planned_restarts,
            "node_states": states,
            "buffer_pool": len(scheduler.pool.available),
        }
        rows = [r for r in scheduler.job_rows(sim.now) if r["tokens_per_day"] is not None]
        if rows:
            out["tokens_per_day"] = sum(r["tokens_per_day"] for r in rows)
            out["tflops_per_gpu"] = rows[0]["tflops_per_gpu"]
        return out
