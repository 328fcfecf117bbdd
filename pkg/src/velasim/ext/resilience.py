"""
Checkpointing, storage backends, job restarts and the hot-spare pool.

Storage sizes are bytes and bandwidths GB/s. The Scale-like cache absorbs
checkpoint writes at cache speed and flushes them to the object store in the
background; the flush is an engine event, never a blocking wait.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
import structlog
import svcs
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat

from ..core.engine import Distribution, Exponential, RngStream, TruncLogNormal
from ..core.exceptions import CacheFull, InvalidPhase, NonPositiveInput, PoolExhausted
from ..core.extensions import BaseExtension
from .collectives import GB
from .topology import ClusterTopology
from .workload import Duration, JobPhase, JobState

if TYPE_CHECKING:
    from ..core.application import Simulation

log = structlog.stdlib.get_logger("velasim.resilience")

MONTH = 30 * 86_400.0
DEFAULT_NODE_CRASH_RATE = 0.02  # per node-month


def young_interval(delta: float, mtbf: float) -> float:
    """Checkpoint interval ``sqrt(2 * delta * mtbf)``."""
    if not (delta > 0 and mtbf > 0) or not math.isfinite(delta * mtbf):
        raise NonPositiveInput(
            "checkpoint cost and MTBF must be positive", details={"delta": delta, "mtbf": mtbf}
        )
    return math.sqrt(2 * delta * mtbf)


def job_mtbf(nodes: int, crash_rate: float = DEFAULT_NODE_CRASH_RATE) -> float:
    """Job MTBF for independent exponential node failures at ``crash_rate`` per node-month."""
    if nodes < 1 or crash_rate <= 0:
        raise NonPositiveInput("nodes and crash rate must be positive", details={"nodes": nodes})
    return MONTH / crash_rate / nodes


# === Configuration ===


class StorageKind(StrEnum):
    NFS_LIKE = "nfs_like"
    SCALE_CACHE = "scale_cache"
    OBJECT_STORE = "object_store"
    SSS_LIKE = "sss_like"


class StorageConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: StorageKind = StorageKind.SCALE_CACHE
    read_bw: PositiveFloat | None = None
    write_bw: PositiveFloat | None = None
    cache_capacity: PositiveFloat = 50e12
    object_read_bw: PositiveFloat = 2.0
    object_write_bw: PositiveFloat = 5.0
    warmup_steps: PositiveFloat = 120.0
    warmup_amplitude: float = Field(default=2.0, ge=0.0)


class CheckpointConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    policy: Literal["young", "fixed"] = "young"
    interval: Duration | None = Field(default=None, gt=0.0)
    interval_multiplier: PositiveFloat = 1.0
    mtbf: Duration | None = Field(default=None, gt=0.0)
    drift_threshold: float = Field(default=0.2, gt=0.0)
    drain_on_checkpoint: bool = True


class PoolConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fraction: float = Field(default=0.10, ge=0.0, lt=1.0)
    reschedule_time: Duration = Field(default=60.0, ge=0.0)


# === Checkpoint policy ===


@dataclass
class CheckpointPolicy:
    """
    When to checkpoint a job.

    A Young policy re-derives its interval when a measured checkpoint cost
    drifts more than ``drift_threshold`` from the one it assumed.
    """

    interval: float
    delta: float
    mtbf_job: float
    kind: Literal["young", "fixed"] = "young"
    multiplier: float = 1.0
    drift_threshold: float = 0.2
    revisions: int = 0

    def __post_init__(self) -> None:
        if self.interval <= 0 or self.delta <= 0:
            raise NonPositiveInput(
                "interval and delta must be positive",
                details={"interval": self.interval, "delta": self.delta},
            )

    @classmethod
    def from_config(
        cls, config: CheckpointConfig, delta: float, mtbf_job: float
    ) -> CheckpointPolicy:
        if config.policy == "fixed":
            if config.interval is None:
                raise NonPositiveInput("a fixed checkpoint policy needs an interval")
            interval = config.interval
        else:
            interval = young_interval(delta, mtbf_job) * config.interval_multiplier
        return cls(
            interval=interval,
            delta=delta,
            mtbf_job=mtbf_job,
            kind=config.policy,
            multiplier=config.interval_multiplier,
            drift_threshold=config.drift_threshold,
        )

    def observe(self, measured_delta: float) -> bool:
        """Feed back a measured checkpoint cost; True if the interval changed."""
        if self.kind != "young" or measured_delta <= 0:
            return False
        if abs(measured_delta - self.delta) <= self.drift_threshold * self.delta:
            return False
        self.delta = measured_delta
        self.interval = young_interval(measured_delta, self.mtbf_job) * self.multiplier
        self.revisions += 1
        log.info("checkpoint_interval_revised", delta=measured_delta, interval=self.interval)
        return True


# === Storage ===


@dataclass(frozen=True, slots=True)
class WriteResult:
    duration: float
    flush_at: float | None = None
    evicted: tuple[str, ...] = ()


@dataclass
class StorageBackend:
    """
    A storage tier with fixed read/write bandwidth and a per-step
    multiplicative effect on data-loading-bound step time.
    """

    kind: StorageKind
    read_bw: float
    write_bw: float
    jitter: Distribution
    median_multiplier: float = 1.0
    warmup_steps: float = 120.0
    warmup_amplitude: float = 0.0

    def __post_init__(self) -> None:
        if self.read_bw <= 0 or self.write_bw <= 0:
            raise NonPositiveInput(
                f"{self.kind} bandwidths must be positive",
                details={"read_bw": self.read_bw, "write_bw": self.write_bw},
            )

    def read(
        self, size: float, now: float = 0.0, key: str | None = None, stream: RngStream | None = None
    ) -> float:
        _require_size(size)
        duration = size / (self.read_bw * GB)
        if stream is not None:
            duration *= stream.draw(self.jitter) / self.median_multiplier
        return duration

    def write(self, size: float, now: float = 0.0, key: str | None = None) -> WriteResult:
        _require_size(size)
        return WriteResult(duration=size / (self.write_bw * GB))

    def complete_flush(self, key: str) -> None:
        pass

    def warmup(self, step_index: float) -> float:
        return 1.0 + self.warmup_amplitude * math.exp(-step_index / self.warmup_steps)

    def step_multiplier(self, step_index: int, stream: RngStream) -> float:
        return stream.draw(self.jitter) * self.warmup(step_index)

    def mean_step_multiplier(self, step_index: float = math.inf) -> float:
        return self.median_multiplier * self.warmup(step_index)


def _require_size(size: float) -> None:
    if size <= 0:
        raise NonPositiveInput("storage transfers need a positive size", details={"size": size})


@dataclass
class ScaleCache(StorageBackend):
    """
    Cache tier over an object store.

    Hits read at cache bandwidth, misses at object-store bandwidth and are
    then cached. Writes land dirty in the cache and are flushed
    asynchronously; evicting a dirty entry pays its flush synchronously.
    """

    capacity: float = 50e12
    object_read_bw: float = 2.0
    object_write_bw: float = 5.0
    entries: OrderedDict[str, tuple[float, bool]] = field(default_factory=OrderedDict)

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.capacity <= 0:
            raise NonPositiveInput(
                "cache capacity must be positive", details={"capacity": self.capacity}
            )

    @property
    def occupancy(self) -> float:
        return sum(size for size, _ in self.entries.values())

    def _admit(self, key: str, size: float, dirty: bool) -> tuple[float, tuple[str, ...]]:
        if size > self.capacity:
            raise CacheFull(
                f"{size:.3g} B exceeds cache capacity {self.capacity:.3g} B",
                details={"size": size, "capacity": self.capacity},
            )
        self.entries.pop(key, None)
        sync_flush = 0.0
        evicted = []
        while self.occupancy + size > self.capacity:
            victim, (victim_size, victim_dirty) = self.entries.popitem(last=False)
            if victim_dirty:
                sync_flush += victim_size / (self.object_write_bw * GB)
            evicted.append(victim)
        self.entries[key] = (size, dirty)
        if evicted:
            log.debug("cache_evicted", keys=evicted, sync_flush=sync_flush)
        return sync_flush, tuple(evicted)

    def read(
        self, size: float, now: float = 0.0, key: str | None = None, stream: RngStream | None = None
    ) -> float:
        _require_size(size)
        if key is not None and key in self.entries:
            self.entries.move_to_end(key)
            duration = size / (self.read_bw * GB)
        else:
            duration = size / (self.object_read_bw * GB)
            if key is not None:
                duration += self._admit(key, size, dirty=False)[0]
        if stream is not None:
            duration *= stream.draw(self.jitter) / self.median_multiplier
        return duration

    def write(self, size: float, now: float = 0.0, key: str | None = None) -> WriteResult:
        _require_size(size)
        key = key or f"object@{now}"
        sync_flush, evicted = self._admit(key, size, dirty=True)
        duration = sync_flush + size / (self.write_bw * GB)
        flush_at = now + duration + size / (self.object_write_bw * GB)
        return WriteResult(duration=duration, flush_at=flush_at, evicted=evicted)

    def complete_flush(self, key: str) -> None:
        if key in self.entries:
            size, _ = self.entries[key]
            self.entries[key] = (size, False)

    def dirty_keys(self) -> list[str]:
        return [k for k, (_, dirty) in self.entries.items() if dirty]


_JITTER: dict[StorageKind, TruncLogNormal] = {
    StorageKind.NFS_LIKE: TruncLogNormal(1.35, 0.12, 1.2, 1.8),
    StorageKind.OBJECT_STORE: TruncLogNormal(1.35, 0.12, 1.2, 1.8),
    StorageKind.SCALE_CACHE: TruncLogNormal(1.0, 0.02, 0.96, 1.04),
    StorageKind.SSS_LIKE: TruncLogNormal(1.0, 0.01, 0.98, 1.02),
}

_BANDWIDTH: dict[StorageKind, tuple[float, float]] = {
    StorageKind.NFS_LIKE: (1.0, 5.0),
    StorageKind.OBJECT_STORE: (2.0, 5.0),
    StorageKind.SCALE_CACHE: (40.0, 15.0),
    StorageKind.SSS_LIKE: (310.0, 155.0),
}


def make_backend(config: StorageConfig) -> StorageBackend:
    kind = config.backend
    read_bw, write_bw = _BANDWIDTH[kind]
    jitter = _JITTER[kind]
    common: dict[str, Any] = {
        "kind": kind,
        "read_bw": config.read_bw or read_bw,
        "write_bw": config.write_bw or write_bw,
        "jitter": jitter,
        "median_multiplier": jitter.median,
        "warmup_steps": config.warmup_steps,
        "warmup_amplitude": config.warmup_amplitude if kind is StorageKind.NFS_LIKE else 0.0,
    }
    if kind is StorageKind.SCALE_CACHE:
        return ScaleCache(
            **common,
            capacity=config.cache_capacity,
            object_read_bw=config.object_read_bw,
            object_write_bw=config.object_write_bw,
        )
    return StorageBackend(**common)


def simulate_step_series(
    backend: StorageBackend, base_step: float, steps: int, stream: RngStream
) -> np.ndarray:
    """Per-iteration step times of a data-loading-bound job on ``backend``."""
    if steps < 1 or base_step <= 0:
        raise NonPositiveInput("need at least one step and a positive base step time")
    draws = stream.sample(backend.jitter, steps)
    warm = 1.0 + backend.warmup_amplitude * np.exp(-np.arange(steps) / backend.warmup_steps)
    return base_step * draws * warm


def steady_state_index(series: Sequence[float], window: int = 50, tolerance: float = 0.03) -> int:
    """First index from which the rolling median stays within ``tolerance`` of the final median."""
    values = np.asarray(series, dtype=float)
    if values.size < window:
        return 0
    medians = np.array([np.median(values[i : i + window]) for i in range(values.size - window + 1)])
    final = medians[-1]
    outside = np.flatnonzero(np.abs(medians - final) > tolerance * final)
    return 0 if outside.size == 0 else int(outside[-1] + 1)


# === Buffer pool ===


@dataclass
class BufferPool:
    """Hot spares held back from scheduling, sized as a fraction of the cluster."""

    target: int
    available: list[str] = field(default_factory=list)
    taken: list[str] = field(default_factory=list)

    @classmethod
    def for_cluster(cls, nodes: int, fraction: float = 0.10) -> BufferPool:
        return cls(target=round(fraction * nodes))

    @property
    def deficit(self) -> int:
        return max(0, self.target - len(self.available))

    def put(self, node: str) -> None:
        if node in self.available:
            return
        self.available.append(node)
        self.available.sort()
        if node in self.taken:
            self.taken.remove(node)

    def take(self) -> str:
        if not self.available:
            raise PoolExhausted("buffer pool is empty", details={"target": self.target})
        node = self.available.pop(0)
        self.taken.append(node)
        return node

    def discard(self, node: str) -> None:
        if node in self.available:
            self.available.remove(node)


# === Checkpoint and restart ===


@dataclass(frozen=True, slots=True)
class RestartTimeline:
    detect: float
    reschedule: float
    reload: float
    recompute: float

    def __post_init__(self) -> None:
        if min(self.detect, self.reschedule, self.reload, self.recompute) < 0:
            raise NonPositiveInput("restart timeline components must be >= 0")

    @property
    def total(self) -> float:
        return self.detect + self.reschedule + self.reload + self.recompute


def checkpoint_key(job: JobState, now: float) -> str:
    return f"{job.id}/ckpt@{now:.3f}"


def checkpoint(job: JobState, backend: StorageBackend, now: float) -> WriteResult:
    """Pause a stepping job for a checkpoint write; the record is added on completion."""
    if job.phase is not JobPhase.STEPPING:
        raise InvalidPhase(
            f"{job.id} cannot checkpoint while {job.phase}", details={"phase": str(job.phase)}
        )
    result = backend.write(job.spec.checkpoint_state_size, now, key=checkpoint_key(job, now))
    job.enter(JobPhase.CHECKPOINTING, now)
    return result


def restart_job(
    job: JobState,
    pool: BufferPool,
    backend: StorageBackend,
    detect: float,
    failed: Iterable[str],
    now: float,
    *,
    spares: Iterable[str] = (),
    reschedule: float = 60.0,
    tainted: Iterable[str] = (),
) -> tuple[RestartTimeline, dict[str, str]]:
    """
    Restart a crashed job on its surviving nodes plus replacements.

    Replacements come from the buffer pool first, then ``spares``. If
    neither covers every failed node the pool is left untouched and
    :class:`PoolExhausted` propagates so the job can pend.
    """
    if job.phase is not JobPhase.CRASHED or job.placement is None:
        raise InvalidPhase(
            f"{job.id} is {job.phase}, not crashed", details={"phase": str(job.phase)}
        )
    failed = sorted(set(failed))
    extra = [s for s in spares if s not in job.nodes]
    mapping: dict[str, str] = {}
    taken: list[str] = []
    try:
        for node in failed:
            if pool.available:
                replacement = pool.take()
                taken.append(replacement)
            elif extra:
                replacement = extra.pop(0)
            else:
                raise PoolExhausted(
                    f"no replacement for {node}", details={"job": job.id, "failed": failed}
                )
            mapping[node] = replacement
    except PoolExhausted:
        for node in taken:
            pool.put(node)
        raise

    record = job.last_checkpoint(exclude_tainted=tainted)
    job.settle(now)
    recompute = job.rollback(record)
    key = checkpoint_key(job, record.time) if record.steps > 0 else None
    reload = backend.read(job.spec.checkpoint_state_size, now, key=key)
    job.placement = job.placement.replace(mapping)
    job.enter(JobPhase.LOADING, now)
    timeline = RestartTimeline(
        detect=detect, reschedule=reschedule, reload=reload, recompute=recompute
    )
    job.restarts.append(timeline)
    log.info(
        "job_restarted",
        job=job.id,
        replaced=mapping,
        recompute=recompute,
        reload=reload,
        sim_time=now,
    )
    return timeline, mapping


@dataclass(frozen=True, slots=True)
class LostTimeReport:
    seconds: dict[str, float]
    fractions: dict[str, float]

    @property
    def goodput(self) -> float:
        return self.fractions["productive"]

    @property
    def lost_fraction(self) -> float:
        return 1.0 - self.goodput


def lost_time_report(jobs: JobState | Iterable[JobState]) -> LostTimeReport:
    """Partition the jobs' wall time into the five ledger categories."""
    items = [jobs] if isinstance(jobs, JobState) else list(jobs)
    seconds = {k: 0.0 for k in ("productive", "checkpoint", "recompute", "detect", "pend")}
    for job in items:
        for category, value in job.ledger.items():
            seconds[category] += value
    total = sum(seconds.values())
    if total <= 0:
        fractions = {k: (1.0 if k == "productive" else 0.0) for k in seconds}
    else:
        fractions = {k: v / total for k, v in seconds.items()}
    return LostTimeReport(seconds=seconds, fractions=fractions)


def simulate_checkpointing(
    interval: float,
    delta: float,
    mtbf: float,
    horizon: float,
    stream: RngStream,
    restart: float = 0.0,
) -> float:
    """
    Lost fraction of a single job that checkpoints every ``interval`` of
    work and fails as a Poisson process. Failures restart from the last
    completed checkpoint after ``restart`` seconds.
    """
    if interval <= 0 or delta <= 0 or mtbf <= 0 or horizon <= 0:
        raise NonPositiveInput("interval, delta, mtbf and horizon must be positive")
    failures: Distribution = Exponential(1.0 / mtbf)
    t = 0.0
    useful = 0.0
    next_failure = stream.draw(failures)
    cycle = interval + delta
    while t < horizon:
        if next_failure >= t + cycle:
            t += cycle
            useful += interval
            continue
        t = next_failure + restart
        next_failure = t + stream.draw(failures)
    return 1.0 - useful / t


# === Extension ===


@dataclass
class ResilienceLog:
    """Checkpoint and restart rows plus the jobs whose ledgers they belong to."""

    checkpoints: list[dict[str, Any]] = field(default_factory=list)
    restarts: list[dict[str, Any]] = field(default_factory=list)
    flushes: list[dict[str, Any]] = field(default_factory=list)
    jobs: list[JobState] = field(default_factory=list)


class ResilienceExtension(BaseExtension):
    """
    Registers the storage backend, the buffer pool and the resilience log.

    The pool starts empty; the scheduler fills it once initial jobs are
    admitted.
    """

    def startup(self, registry: svcs.Registry, sim: Simulation) -> dict[str, Any]:
        backend = make_backend(sim.scenario.storage)
        record = ResilienceLog()

        def storage_ping(backend: StorageBackend) -> None:
            if isinstance(backend, ScaleCache):
                assert backend.occupancy <= backend.capacity, "cache occupancy exceeds capacity"

        def ledger_ping(record: ResilienceLog) -> None:
            for job in record.jobs:
                negative = [k for k, v in job.ledger.items() if v < -1e-6]
                assert not negative, f"{job.id} has negative lost time in {negative}"

        registry.register_value(StorageBackend, backend, ping=storage_ping)
        registry.register_value(ResilienceLog, record, ping=ledger_ping)

        def pool_factory(svcs_container: svcs.Container) -> BufferPool:
            hosts = svcs_container.get(ClusterTopology).hosts
            return BufferPool.for_cluster(len(hosts), sim.scenario.pool.fraction)

        def pool_ping(pool: BufferPool) -> None:
            assert not set(pool.available) & set(pool.taken), "spare is both available and taken"

        registry.register_factory(BufferPool, pool_factory, ping=pool_ping)

        def on_flush(event: Any) -> None:
            backend.complete_flush(event.target)
            record.flushes.append({"time": event.time, "key": event.target})

        sim.engine.on("flush_done", on_flush)
        return {}

    def report(self, sim: Simulation) -> dict[str, list[dict[str, Any]]]:
        record = sim.get(ResilienceLog)
        lost = lost_time_report(record.jobs)
        rows = [
            {"category": k, "seconds": lost.seconds[k], "fraction": lost.fractions[k]}
            for k in lost.seconds
        ]
        return {"checkpoints": record.checkpoints, "restarts": record.restarts, "lost_time": rows}

    def summary(self, sim: Simulation) -> dict[str, Any]:
        record = sim.get(ResilienceLog)
        lost = lost_time_report(record.jobs)
        return {
            "backend": str(sim.get(StorageBackend).kind),
            "checkpoints": len(record.checkpoints),
            "restarts": len(record.restarts),
            "lost_fraction": round(lost.lost_fraction, 9),
            "lost_time": {k: round(v, 9) for k, v in lost.fractions.items()},
        }
