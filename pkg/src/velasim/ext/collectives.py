"""
Cost models for training communication: ring all-reduce across the fabric,
point-to-point pipeline transfers and NVLink all-reduce inside a node, with
nccl-tests style bandwidth reporting.

Sizes are bytes, bandwidths GB/s (1e9 bytes), times seconds.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from enum import StrEnum
from typing import Any, Literal

import structlog
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator

from ..core.exceptions import InsufficientNodes, NonPositiveInput, NoPath, TPExceedsNode
from .network import Flow, Network, Transport, path_model_cap
from .topology import NodeSpec

log = structlog.stdlib.get_logger("velasim.collectives")

GB = 1e9


class CollectiveKind(StrEnum):
    ALLREDUCE_RING = "allreduce_ring"
    P2P = "p2p"
    ALLREDUCE_NVLINK = "allreduce_nvlink"


class CollectiveSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: CollectiveKind = CollectiveKind.ALLREDUCE_RING
    participants: PositiveInt
    message_size: PositiveInt
    protocol: Transport = Transport.GDR

    @model_validator(mode="after")
    def _enough_participants(self) -> CollectiveSpec:
        if self.participants < 2:
            raise ValueError("collectives need at least 2 participants")
        return self


@dataclass(frozen=True, slots=True)
class CollectiveResult:
    duration: float
    algbw: float
    busbw: float


@dataclass(frozen=True, slots=True)
class BenchmarkRow:
    size: int
    count: int
    protocol: str
    time: float
    algbw: float
    busbw: float

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


def _ring_result(size: float, n: int, duration: float) -> CollectiveResult:
    algbw = size / duration / GB
    return CollectiveResult(duration=duration, algbw=algbw, busbw=algbw * 2 * (n - 1) / n)


def ring_allreduce_time(
    size: float, participants: int, bandwidth: float, latency: float
) -> CollectiveResult:
    """
    Ring all-reduce: ``2(N-1)`` steps, each moving ``S/N`` bytes over the
    ring's bottleneck segment and paying one hop latency.
    """
    if participants < 2 or size <= 0 or bandwidth <= 0 or latency < 0:
        raise NonPositiveInput(
            "ring all-reduce needs N >= 2, S > 0, B > 0 and L >= 0",
            details={"participants": participants, "size": size, "bandwidth": bandwidth},
        )
    n = participants
    duration = 2 * (n - 1) * ((size / n) / (bandwidth * GB) + latency)
    return _ring_result(size, n, duration)


def nvlink_allreduce_time(
    size: float, tp_degree: int, node: NodeSpec, latency: float = 0.0
) -> float:
    if tp_degree > node.gpus_per_node:
        raise TPExceedsNode(
            f"tp={tp_degree} exceeds {node.gpus_per_node} GPUs per node",
            details={"tp": tp_degree, "gpus_per_node": node.gpus_per_node},
        )
    if tp_degree <= 1 or size <= 0:
        return 0.0
    return 2 * (tp_degree - 1) * ((size / tp_degree) / (node.nvlink_bw * GB) + latency)


def transfer_rate(
    network: Network,
    src: str,
    dst: str,
    protocol: Transport | str = Transport.GDR,
    nic: int = 0,
    tag: str = "p2p",
) -> tuple[float, float]:
    """
    Idle-network rate (GB/s) and one-way latency between two hosts using
    NIC ``nic`` on both ends, one lane-aligned subflow per NIC port.

    When that NIC has no live path the transfer re-resolves over any NIC.
    """
    topo = network.topo
    spec = topo.node_spec
    src_nics, dst_nics = topo.nics(src), topo.nics(dst)
    pinned = None
    if src_nics and dst_nics:
        pinned = (src_nics[nic % len(src_nics)], dst_nics[nic % len(dst_nics)])

    def subflows(src_nic: str | None, dst_nic: str | None) -> list[Flow]:
        return [
            Flow(
                id=f"{tag}/{src}/{dst}/{lane}",
                src=src,
                dst=dst,
                bytes_total=1.0,
                protocol=Transport(protocol),
                src_nic=src_nic,
                dst_nic=dst_nic,
                lane=lane,
            )
            for lane in range(spec.ports_per_nic)
        ]

    try:
        if pinned is None:
            raise NoPath(f"{src} or {dst} has no NIC", details={"src": src, "dst": dst})
        flows = subflows(*pinned)
        network.allocate(flows)
    except NoPath:
        flows = subflows(None, None)
        network.allocate(flows)
    rate = sum(f.allocated_rate for f in flows)
    latency = max(network.hop_latency(protocol, f.path or []) for f in flows)
    return rate, latency


def p2p_time(
    size: float, src: str, dst: str, protocol: Transport | str, network: Network
) -> float:
    if size < 1:
        raise NonPositiveInput("p2p transfers move at least one byte", details={"size": size})
    if src == dst:
        raise NoPath("p2p endpoints must be distinct", details={"src": src})
    rate, latency = transfer_rate(network, src, dst, protocol)
    return size / (rate * GB) + latency


def ring_hosts(network: Network, gpus: int, hosts: Sequence[str] | None = None) -> list[str]:
    per_node = network.topo.node_spec.gpus_per_node
    needed = math.ceil(gpus / per_node)
    pool = list(hosts) if hosts is not None else network.topo.hosts
    if needed > len(pool):
        raise InsufficientNodes(
            f"{gpus} GPUs need {needed} nodes, topology has {len(pool)}",
            details={"needed": needed, "available": len(pool)},
        )
    return pool[:needed]


def analytic_ring_context(
    network: Network, protocol: Transport | str, hosts: Sequence[str]
) -> tuple[float, float]:
    """Bottleneck bandwidth and hop latency of a ring over ``hosts`` from path caps."""
    spec = network.topo.node_spec
    if len(hosts) < 2:
        return spec.nvlink_bw, network.config.nvlink_latency
    cap = path_model_cap(protocol, spec, network.params)
    latency = max(
        network.representative_latency(protocol, a, b)
        for a, b in zip(hosts, [*hosts[1:], hosts[0]], strict=True)
    )
    return cap.bandwidth, latency


def simulated_ring_context(
    network: Network, protocol: Transport | str, hosts: Sequence[str], channel: int = 0
) -> tuple[float, float]:
    """
    Bottleneck bandwidth and hop latency of a ring measured by driving its
    inter-node segments through the max-min allocator at once.
    """
    spec = network.topo.node_spec
    if len(hosts) < 2:
        return spec.nvlink_bw, network.config.nvlink_latency
    segments: dict[int, list[Flow]] = {}
    for k, (a, b) in enumerate(zip(hosts, [*hosts[1:], hosts[0]], strict=True)):
        segments[k] = [
            Flow(
                id=f"ring/{k}/{lane}",
                src=a,
                dst=b,
                bytes_total=1.0,
                protocol=Transport(protocol),
                src_nic=network.topo.nics(a)[channel],
                dst_nic=network.topo.nics(b)[channel],
                lane=lane,
            )
            for lane in range(spec.ports_per_nic)
        ]
    flows = [f for group in segments.values() for f in group]
    network.allocate(flows)
    bandwidth = min(sum(f.allocated_rate for f in group) for group in segments.values())
    latency = max(network.hop_latency(protocol, f.path or []) for f in flows)
    return bandwidth, latency


def simulate_ring_allreduce(
    size: float,
    gpus: int,
    network: Network,
    protocol: Transport | str = Transport.GDR,
    hosts: Sequence[str] | None = None,
) -> CollectiveResult:
    bandwidth, latency = simulated_ring_context(network, protocol, ring_hosts(network, gpus, hosts))
    return ring_allreduce_time(size, gpus, bandwidth, latency)


def busbw_report(spec: CollectiveSpec, result: CollectiveResult) -> BenchmarkRow:
    return BenchmarkRow(
        size=spec.message_size,
        count=spec.participants,
        protocol=str(spec.protocol),
        time=result.duration,
        algbw=result.algbw,
        busbw=result.busbw,
    )


class BusbwSweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    protocols: list[Transport] = [Transport.TCP, Transport.ROCE, Transport.GDR]
    sizes: list[PositiveInt] = Field(
        default_factory=lambda: [2**k * 1_000_000 for k in range(3, 12)]
    )
    gpu_counts: list[PositiveInt] = [256]
    mode: Literal["analytic", "simulated"] = "analytic"

    @model_validator(mode="after")
    def _non_empty(self) -> BusbwSweepConfig:
        if not (self.protocols and self.sizes and self.gpu_counts):
            raise ValueError("protocols, sizes and gpu_counts must be non-empty")
        return self


def run_busbw_sweep(network: Network, config: BusbwSweepConfig) -> list[BenchmarkRow]:
    """
    all_reduce_perf-style sweep: one row per protocol x GPU count x size.

    The transport context depends only on protocol and ring membership, so
    it is resolved once per pair and reused across message sizes.
    """
    rows: list[BenchmarkRow] = []
    for protocol in config.protocols:
        for gpus in config.gpu_counts:
            hosts = ring_hosts(network, gpus)
            if config.mode == "simulated":
                bandwidth, latency = simulated_ring_context(network, protocol, hosts)
            else:
                bandwidth, latency = analytic_ring_context(network, protocol, hosts)
            for size in config.sizes:
                spec = CollectiveSpec(participants=gpus, message_size=size, protocol=protocol)
                rows.append(busbw_report(spec, ring_allreduce_time(size, gpus, bandwidth, latency)))
            log.debug("busbw_point", protocol=str(protocol), gpus=gpus, bandwidth=bandwidth)
    return rows


def protocol_table(rows: Iterable[BenchmarkRow], gpus: int | None = None) -> list[dict[str, Any]]:
    """Pivot benchmark rows into one column of busbw per protocol."""
    table: dict[int, dict[str, Any]] = {}
    for row in rows:
        if gpus is not None and row.count != gpus:
            continue
        table.setdefault(row.size, {"size": row.size})[row.protocol] = row.busbw
    return [table[size] for size in sorted(table)]
