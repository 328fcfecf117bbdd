"""
Distributed training jobs.

A job is a TP x PP x DP parallelism plan placed on whole nodes. Its step
time is the slowest participating node's compute plus exposed
communication, and its progress is integrated fluidly between events.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Annotated, Any, Literal

import structlog
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PositiveFloat, PositiveInt

from ..core.exceptions import InsufficientNodes, InvalidPhase, InvalidSpec, JobCrashed
from .collectives import GB, nvlink_allreduce_time, ring_allreduce_time
from .network import Flow, Network, Transport
from .topology import ClusterTopology, NodeSpec

if TYPE_CHECKING:
    from .resilience import RestartTimeline

log = structlog.stdlib.get_logger("velasim.workload")

DAY = 86_400.0
FSDP_VOLUME_FACTOR = 1.5

_UNITS = {"s": 1.0, "m": 60.0, "h": 3600.0, "d": DAY}


def parse_duration(value: Any) -> Any:
    """Accept seconds or strings such as ``"300s"``, ``"12h"``, ``"30d"``."""
    if isinstance(value, str):
        text = value.strip()
        if text and text[-1] in _UNITS:
            return float(text[:-1]) * _UNITS[text[-1]]
        return float(text)
    return value


type Duration = Annotated[float, BeforeValidator(parse_duration)]


class Sharding(StrEnum):
    NONE = "none"
    FSDP = "fsdp"


class JobSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "job"
    params: PositiveFloat
    tp: PositiveInt = 1
    pp: PositiveInt = 1
    dp: PositiveInt = 1
    gpus: PositiveInt | None = None
    global_batch_tokens: PositiveInt = 4_194_304
    bytes_per_grad_element: PositiveInt = 2
    # Derived from target_tflops when unset.
    base_step_compute: PositiveFloat | None = None
    target_tflops: PositiveFloat = 140.0
    checkpoint_state_size: PositiveFloat = 1e12
    target_tokens: PositiveFloat | None = None
    overlap: float = Field(default=0.0, ge=0.0, le=1.0)
    protocol: Transport = Transport.GDR
    host_io_bytes_per_step: float = Field(default=2e9, ge=0.0)
    tp_bytes_per_step: float = Field(default=0.0, ge=0.0)
    pp_bytes_per_step: float = Field(default=0.0, ge=0.0)
    flops_factor: PositiveFloat = 6.0
    sharding: Sharding = Sharding.NONE
    submit_at: Duration = Field(default=0.0, ge=0.0)
    priority: int = 0

    @property
    def gpu_count(self) -> int:
        return self.tp * self.pp * self.dp

    def check(self, node: NodeSpec) -> None:
        if self.gpus is not None and self.gpus != self.gpu_count:
            raise InvalidSpec(
                f"{self.name}: tp*pp*dp = {self.gpu_count} but {self.gpus} GPUs requested",
                details={"tp": self.tp, "pp": self.pp, "dp": self.dp, "gpus": self.gpus},
            )
        if self.tp > node.gpus_per_node or node.gpus_per_node % self.tp:
            raise InvalidSpec(
                f"{self.name}: tp={self.tp} must divide {node.gpus_per_node} GPUs per node",
                details={"tp": self.tp, "gpus_per_node": node.gpus_per_node},
            )

    def nodes_needed(self, node: NodeSpec) -> int:
        return math.ceil(self.gpu_count / node.gpus_per_node)

    def step_compute(self) -> float:
        if self.base_step_compute is not None:
            return self.base_step_compute
        flops = self.flops_factor * self.params * self.global_batch_tokens
        return flops / (self.gpu_count * self.target_tflops * 1e12)

    def dp_message_bytes(self) -> float:
        """Gradient shard each DP replica all-reduces per step."""
        size = self.params / (self.tp * self.pp) * self.bytes_per_grad_element
        return size * (FSDP_VOLUME_FACTOR if self.sharding is Sharding.FSDP else 1.0)

    @property
    def target_steps(self) -> int | None:
        if self.target_tokens is None:
            return None
        return math.ceil(self.target_tokens / self.global_batch_tokens)


# === Placement ===


@dataclass(frozen=True)
class Placement:
    nodes: tuple[str, ...]
    gpus_per_node: int
    tp: int
    pp: int
    dp: int

    def rank(self, tp_index: int, dp_index: int, stage: int) -> int:
        return tp_index + self.tp * (dp_index + self.dp * stage)

    def node_of(self, rank: int) -> str:
        return self.nodes[rank // self.gpus_per_node]

    def local_of(self, rank: int) -> int:
        return rank % self.gpus_per_node

    def dp_rings(self) -> list[list[int]]:
        return [
            [self.rank(i, d, s) for d in range(self.dp)]
            for s in range(self.pp)
            for i in range(self.tp)
        ]

    def pp_pairs(self) -> list[tuple[int, int]]:
        return [
            (self.rank(i, d, s), self.rank(i, d, s + 1))
            for s in range(self.pp - 1)
            for d in range(self.dp)
            for i in range(self.tp)
        ]

    def replace(self, mapping: dict[str, str]) -> Placement:
        """Swap nodes in place, keeping every rank on the same slot."""
        return Placement(
            tuple(mapping.get(n, n) for n in self.nodes),
            self.gpus_per_node,
            self.tp,
            self.pp,
            self.dp,
        )


def plan_parallelism(
    spec: JobSpec, topo: ClusterTopology, available: Sequence[str] | None = None
) -> Placement:
    """
    Place TP groups inside nodes, then DP replicas, then PP stages.

    Ranks are laid out stage-major so each stage's DP rings run over
    consecutive nodes; nodes are drawn from the fullest racks first so those
    rings stay under as few TORs as possible.
    """
    node = topo.node_spec
    spec.check(node)
    needed = spec.nodes_needed(node)
    candidates = list(topo.hosts if available is None else available)
    if len(candidates) < needed:
        raise InsufficientNodes(
            f"{spec.name} needs {needed} nodes, {len(candidates)} available",
            details={"needed": needed, "available": len(candidates)},
        )
    by_rack: dict[str, list[str]] = {}
    for host in candidates:
        by_rack.setdefault(topo.rack_of(host), []).append(host)
    racks = sorted(by_rack, key=lambda r: (-len(by_rack[r]), r))
    ordered = [h for r in racks for h in sorted(by_rack[r])]
    return Placement(tuple(ordered[:needed]), node.gpus_per_node, spec.tp, spec.pp, spec.dp)


# === Step time ===


@dataclass
class ClusterView:
    """What step time needs to know about the cluster at one instant."""

    network: Network
    slowdown: Callable[[str], float] = lambda node: 1.0
    is_down: Callable[[str], bool] = lambda node: False
    storage_multiplier: float = 1.0
    mode: Literal["analytic", "simulated"] = "analytic"

    @property
    def topo(self) -> ClusterTopology:
        return self.network.topo


type Segment = tuple[str, str, int]  # src host, dst host, NIC index


def _ring_segments(placement: Placement, ring: Sequence[int], node: NodeSpec) -> list[Segment]:
    segments = []
    for a, b in zip(ring, [*ring[1:], ring[0]], strict=True):
        src, dst = placement.node_of(a), placement.node_of(b)
        if src != dst:
            segments.append((src, dst, node.gpu_nic(placement.local_of(a))))
    return segments


def _analytic_segment_rates(
    segments: Sequence[Segment], view: ClusterView, protocol: Transport
) -> dict[Segment, float]:
    topo, network = view.topo, view.network
    tx: dict[tuple[str, int], int] = {}
    rx: dict[tuple[str, int], int] = {}
    host_tx: dict[str, int] = {}
    host_rx: dict[str, int] = {}
    for src, dst, nic in segments:
        tx[src, nic] = tx.get((src, nic), 0) + 1
        rx[dst, nic] = rx.get((dst, nic), 0) + 1
        host_tx[src] = host_tx.get(src, 0) + 1
        host_rx[dst] = host_rx.get(dst, 0) + 1
    rates = {}
    for seg in segments:
        src, dst, nic = seg
        rates[seg] = min(
            network.nic_rate(topo.nics(src)[nic], protocol) / tx[src, nic],
            network.nic_rate(topo.nics(dst)[nic], protocol) / rx[dst, nic],
            network.host_rate(src, protocol) / host_tx[src],
            network.host_rate(dst, protocol) / host_rx[dst],
        )
    return rates


def _simulated_segment_rates(
    segments: Sequence[Segment], view: ClusterView, protocol: Transport
) -> dict[Segment, float]:
    topo = view.topo
    groups: dict[Segment, list[Flow]] = {}
    for k, seg in enumerate(segments):
        src, dst, nic = seg
        groups.setdefault(seg, []).extend(
            Flow(
                id=f"seg/{k}/{lane}",
                src=src,
                dst=dst,
                bytes_total=1.0,
                protocol=protocol,
                src_nic=topo.nics(src)[nic],
                dst_nic=topo.nics(dst)[nic],
                lane=lane,
            )
            for lane in range(topo.node_spec.ports_per_nic)
        )
    flows = [f for group in groups.values() for f in group]
    view.network.allocate(flows)
    counts: dict[Segment, int] = {}
    for seg in segments:
        counts[seg] = counts.get(seg, 0) + 1
    return {
        seg: sum(f.allocated_rate for f in group) / counts[seg] for seg, group in groups.items()
    }


def node_step_times(job: JobState, view: ClusterView) -> dict[str, float]:
    spec, placement = job.spec, job.placement
    if placement is None:
        raise InvalidPhase(f"{job.id} is not placed", details={"phase": str(job.phase)})
    if down := [n for n in placement.nodes if view.is_down(n)]:
        raise JobCrashed(f"{job.id} lost node(s) {down}", details={"job": job.id, "nodes": down})
    topo, network = view.topo, view.network
    node = topo.node_spec
    protocol = spec.protocol

    rings = placement.dp_rings() if spec.dp > 1 else []
    ring_segments = [_ring_segments(placement, ring, node) for ring in rings]
    pairs = placement.pp_pairs() if spec.pp_bytes_per_step > 0 else []
    pp_segments = [
        (placement.node_of(a), placement.node_of(b), node.gpu_nic(placement.local_of(a)))
        for a, b in pairs
        if placement.node_of(a) != placement.node_of(b)
    ]
    all_segments = [seg for segs in ring_segments for seg in segs] + pp_segments
    if view.mode == "simulated" and all_segments:
        rates = _simulated_segment_rates(all_segments, view, protocol)
    else:
        rates = _analytic_segment_rates(all_segments, view, protocol)

    exposed = 1.0 - spec.overlap
    comm: dict[str, float] = {n: 0.0 for n in placement.nodes}
    message = spec.dp_message_bytes()
    for ring, segs in zip(rings, ring_segments, strict=True):
        if segs:
            bandwidth = min(rates[s] for s in segs)
            latency = max(network.representative_latency(protocol, s[0], s[1]) for s in segs)
        else:
            bandwidth, latency = node.nvlink_bw, network.config.nvlink_latency
        duration = ring_allreduce_time(message, spec.dp, bandwidth, latency).duration
        for n in {placement.node_of(r) for r in ring}:
            comm[n] = max(comm[n], duration)
    for seg in pp_segments:
        src, dst, _ = seg
        duration = spec.pp_bytes_per_step / (rates[seg] * GB)
        duration += network.representative_latency(protocol, src, dst)
        comm[src] += duration
    tp_time = nvlink_allreduce_time(spec.tp_bytes_per_step, spec.tp, node)

    compute = spec.step_compute() * (1 + node.virt_overhead) * view.storage_multiplier
    times = {}
    for n in placement.nodes:
        host_io = spec.host_io_bytes_per_step / (topo.host_link_gbs(n) * GB)
        times[n] = compute * view.slowdown(n) + host_io + (tp_time + comm[n]) * exposed
    return times


def step_time(job: JobState, view: ClusterView) -> float:
    """Job step time: the maximum over participating nodes."""
    if job.phase is not JobPhase.STEPPING:
        raise InvalidPhase(
            f"{job.id} is {job.phase}, not stepping", details={"phase": str(job.phase)}
        )
    return max(node_step_times(job, view).values())


# === Job state ===


class JobPhase(StrEnum):
    PENDING = "pending"
    LOADING = "loading"
    STEPPING = "stepping"
    CHECKPOINTING = "checkpointing"
    CRASHED = "crashed"
    RESTARTING = "restarting"
    COMPLETED = "completed"


LEDGER_CATEGORIES = ("productive", "checkpoint", "recompute", "detect", "pend")

PHASE_LEDGER = {
    JobPhase.PENDING: "pend",
    JobPhase.LOADING: "pend",
    JobPhase.RESTARTING: "pend",
    JobPhase.STEPPING: "productive",
    JobPhase.CHECKPOINTING: "checkpoint",
    JobPhase.CRASHED: "detect",
}


@dataclass(frozen=True, slots=True)
class CheckpointRecord:
    time: float
    steps: float
    cum_productive: float
    tainted_by: tuple[str, ...] = ()


@dataclass
class JobState:
    """
    Mutable state of one job.

    ``steps_done`` is the training position and moves back on a rollback;
    ``steps_processed`` counts every step ever executed and only grows.
    Wall time since submission is partitioned into the ledger categories.
    """

    id: str
    spec: JobSpec
    submitted_at: float = 0.0
    phase: JobPhase = JobPhase.PENDING
    placement: Placement | None = None
    steps_done: float = 0.0
    steps_processed: float = 0.0
    step_time: float = math.inf
    last_update: float = 0.0
    cum_productive: float = 0.0
    ledger: dict[str, float] = field(default_factory=lambda: dict.fromkeys(LEDGER_CATEGORIES, 0.0))
    checkpoints: list[CheckpointRecord] = field(default_factory=list)
    restarts: list[RestartTimeline] = field(default_factory=list)
    step_series: list[tuple[float, float]] = field(default_factory=list)
    drain: dict[str, str] = field(default_factory=dict)
    timers: dict[str, int] = field(default_factory=dict)
    started_at: float | None = None
    completed_at: float | None = None

    def __post_init__(self) -> None:
        self.last_update = self.submitted_at

    @property
    def tokens_done(self) -> float:
        return self.steps_done * self.spec.global_batch_tokens

    @property
    def tokens_processed(self) -> float:
        return self.steps_processed * self.spec.global_batch_tokens

    @property
    def remaining_steps(self) -> float:
        target = self.spec.target_steps
        return math.inf if target is None else max(0.0, target - self.steps_done)

    @property
    def wall_time(self) -> float:
        return sum(self.ledger.values())

    @property
    def nodes(self) -> tuple[str, ...]:
        return self.placement.nodes if self.placement else ()

    def settle(self, now: float) -> None:
        dt = now - self.last_update
        if dt <= 0:
            return
        self.last_update = now
        category = PHASE_LEDGER.get(self.phase)
        if category is None:
            return
        self.ledger[category] += dt
        if self.phase is JobPhase.STEPPING and math.isfinite(self.step_time):
            steps = min(dt / self.step_time, self.remaining_steps)
            self.steps_done += steps
            self.steps_processed += steps
            self.cum_productive += dt

    def enter(self, phase: JobPhase, now: float) -> None:
        self.settle(now)
        log.debug("job_phase", job=self.id, phase=str(phase), sim_time=now)
        self.phase = phase

    def set_step_time(self, value: float, now: float) -> None:
        self.settle(now)
        if not self.step_series or not math.isclose(self.step_series[-1][1], value):
            self.step_series.append((now, value))
        self.step_time = value

    def last_checkpoint(self, exclude_tainted: Iterable[str] = ()) -> CheckpointRecord:
        bad = set(exclude_tainted)
        for record in reversed(self.checkpoints):
            if not bad.intersection(record.tainted_by):
                return record
        start = self.started_at or self.submitted_at
        return CheckpointRecord(time=start, steps=0.0, cum_productive=0.0)

    def rollback(self, record: CheckpointRecord) -> float:
        """Return to ``record``; productive time since then becomes recompute."""
        lost = max(0.0, self.cum_productive - record.cum_productive)
        self.ledger["productive"] -= lost
        self.ledger["recompute"] += lost
        self.steps_done = min(self.steps_done, record.steps)
        self.cum_productive = record.cum_productive
        return lost


# === Throughput ===


@dataclass(frozen=True, slots=True)
class ThroughputReport:
    tokens_per_day: float
    tflops_per_gpu: float
    gpu_hours: float
    goodput: float


def tflops_per_gpu(
    params: float, tokens_per_day: float, gpus: int, flops_factor: float = 6.0
) -> float:
    return flops_factor * params * (tokens_per_day / DAY) / gpus / 1e12


def gpu_hours(gpus: int, wall_seconds: float) -> float:
    return gpus * wall_seconds / 3600.0


def throughput_report(job: JobState, start: float, end: float) -> ThroughputReport:
    if job.steps_done < 1 or end <= start:
        raise InvalidPhase(
            f"{job.id} has no completed step to report (phase {job.phase})",
            details={"phase": str(job.phase), "steps_done": job.steps_done},
        )
    wall = end - start
    tokens_per_day = job.tokens_done / wall * DAY
    spent = job.wall_time
    goodput = job.ledger["productive"] / spent if spent > 0 else 0.0
    return ThroughputReport(
        tokens_per_day=tokens_per_day,
        tflops_per_gpu=tflops_per_gpu(
            job.spec.params, tokens_per_day, job.spec.gpu_count, job.spec.flops_factor
        ),
        gpu_hours=gpu_hours(job.spec.gpu_count, wall),
        goodput=min(1.0, max(0.0, goodput)),
    )


def closed_form_tokens_per_day(spec: JobSpec, step_seconds: float) -> float:
    return spec.global_batch_tokens / step_seconds * DAY
