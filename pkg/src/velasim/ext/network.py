"""
Flow-level transport over a cluster topology.

Paths are chosen by ECMP hashing among equal-cost shortest paths, rates are
assigned by weighted progressive filling (max-min fairness), and congestion
is modeled as a fluid queue with WRED/ECN marking and DCQCN-style sender
rate control. Rates are in GB/s, queue sizes in bytes.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import TYPE_CHECKING, Any, Literal

import structlog
import svcs
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from ..core.engine import RngStream
from ..core.exceptions import NoPath
from ..core.extensions import BaseExtension
from .topology import ClusterTopology, NodeSpec, TopologyDelta

if TYPE_CHECKING:
    from ..core.application import Simulation

log = structlog.stdlib.get_logger("velasim.network")

FILL_EPSILON = 1e-12


class Transport(StrEnum):
    TCP = "tcp"
    ROCE = "roce"
    GDR = "gdr"


class ProtocolParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # None means the NIC line rate is the only cap.
    attach_cap: PositiveFloat | None = None  # GB/s per NIC
    per_message_overhead: float = Field(ge=0.0)  # seconds
    copy_penalty: float = Field(ge=0.0)  # host-link traversals per byte
    loss_stall_rtts: float = Field(default=2.0, ge=0.0)


class PathModelParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tcp: ProtocolParams = ProtocolParams(
        attach_cap=6.0, per_message_overhead=37e-6, copy_penalty=2.0, loss_stall_rtts=2.0
    )
    roce: ProtocolParams = ProtocolParams(
        attach_cap=14.0, per_message_overhead=10e-6, copy_penalty=1.0, loss_stall_rtts=10.0
    )
    gdr: ProtocolParams = ProtocolParams(
        attach_cap=None, per_message_overhead=2.5e-6, copy_penalty=0.0, loss_stall_rtts=10.0
    )

    def for_(self, transport: Transport | str) -> ProtocolParams:
        params: ProtocolParams = getattr(self, Transport(transport).value)
        return params


class EcnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kmin: PositiveInt = 100_000
    kmax: PositiveInt = 400_000
    pmax: float = Field(default=0.2, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self) -> EcnConfig:
        if self.kmin >= self.kmax:
            raise ValueError("kmin must be below kmax")
        return self


class DcqcnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    g: float = Field(default=1 / 16, gt=0.0, lt=1.0)
    initial_alpha: float = Field(default=1.0, ge=0.0, le=1.0)
    recovery_period: PositiveFloat = 55e-6
    fast_recovery_stages: PositiveInt = 5
    additive_increase: PositiveFloat = 0.5  # GB/s
    min_rate: PositiveFloat = 0.01  # GB/s
    cnp_interval: PositiveFloat = 4e-6
    cnp_latency: PositiveFloat = 2e-6


class IncastConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    senders: PositiveInt = 8
    duration: PositiveFloat = 5e-3
    dt: PositiveFloat = 2e-6
    mtu: PositiveInt = 4096
    rtt: PositiveFloat = 10e-6
    protocol: Literal["tcp", "roce"] = "roce"
    congestion_control: bool = True
    sample_every: PositiveInt = 5


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["analytic", "simulated"] = "analytic"
    paths: PathModelParams = PathModelParams()
    ecn: EcnConfig = EcnConfig()
    dcqcn: DcqcnConfig = DcqcnConfig()
    ecmp_salt: int | None = None
    nvlink_latency: float = Field(default=1e-6, ge=0.0)


# === Flows ===


@dataclass(frozen=True, slots=True)
class CongestionState:
    current_rate: float
    target_rate: float
    line_rate: float
    alpha: float = 1.0
    last_cnp_time: float = -math.inf
    recovery_stage: int = 0


@dataclass
class Flow:
    id: str
    src: str
    dst: str
    bytes_total: float
    protocol: Transport = Transport.GDR
    src_nic: str | None = None
    dst_nic: str | None = None
    lane: int | None = None
    bytes_done: float = 0.0
    path: list[str] | None = None
    allocated_rate: float = 0.0
    sender_cc: CongestionState | None = None

    @property
    def remaining(self) -> float:
        return max(0.0, self.bytes_total - self.bytes_done)


def _hash(flow_id: str, salt: int) -> int:
    digest = hashlib.blake2b(f"{flow_id}|{salt}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def equal_cost_paths(
    topo: ClusterTopology,
    src: str,
    dst: str,
    src_nic: str | None = None,
    dst_nic: str | None = None,
) -> list[list[str]]:
    """
    All shortest host-to-host paths over live links.

    Hosts never carry transit traffic: a path leaves ``src`` through one of
    its NICs, crosses switches only, and enters ``dst`` through one of its
    NICs.
    """
    if src == dst:
        raise NoPath(f"{src} to itself is not a fabric path", details={"src": src})
    starts = [src_nic] if src_nic else topo.nics(src)
    ends = set([dst_nic] if dst_nic else topo.nics(dst))
    starts = [n for n in starts if topo.edge_live(src, n)]
    ends = {n for n in ends if topo.edge_live(n, dst)}

    dist: dict[str, int] = {n: 0 for n in starts}
    preds: dict[str, list[str]] = {n: [] for n in starts}
    frontier = deque(starts)
    best: int | None = None
    while frontier:
        u = frontier.popleft()
        if best is not None and dist[u] >= best:
            continue
        for v in topo.graph.adj[u]:
            if v in ends:
                if not topo.is_switch(u) or not topo.edge_live(u, v):
                    continue
            elif not topo.is_switch(v) or not topo.edge_live(u, v):
                continue
            if v not in dist:
                dist[v] = dist[u] + 1
                preds[v] = [u]
                if v in ends:
                    best = dist[v] if best is None else min(best, dist[v])
                else:
                    frontier.append(v)
            elif dist[v] == dist[u] + 1:
                preds[v].append(u)

    reached = sorted(n for n in ends if n in dist and dist[n] == best)
    if not reached:
        raise NoPath(f"no live path from {src} to {dst}", details={"src": src, "dst": dst})

    paths: list[list[str]] = []

    def walk(node: str, suffix: list[str]) -> None:
        if not preds[node]:
            paths.append([src, node, *suffix, dst])
            return
        for p in preds[node]:
            walk(p, [node, *suffix])

    for end in reached:
        walk(end, [])
    paths.sort()
    return paths


def _lane_aligned(topo: ClusterTopology, path: Sequence[str], lane: int) -> bool:
    first = topo.graph.edges[path[1], path[2]].get("port")
    last = topo.graph.edges[path[-2], path[-3]].get("port")
    return first == lane and last == lane


def select_path_ecmp(
    flow: Flow,
    topo: ClusterTopology,
    salt: int = 0,
    candidates: list[list[str]] | None = None,
) -> list[str]:
    """
    Pick one equal-cost path by hashing ``(flow.id, salt)``.

    With a lane hint, paths whose NIC ports on both ends match the lane are
    preferred; when none is live the choice falls back to any live path.
    """
    paths = candidates or equal_cost_paths(topo, flow.src, flow.dst, flow.src_nic, flow.dst_nic)
    if flow.lane is not None:
        aligned = [p for p in paths if _lane_aligned(topo, p, flow.lane)]
        paths = aligned or paths
    return paths[_hash(flow.id, salt) % len(paths)]


# === Rate allocation ===


type ResourceKey = tuple[str, str, str]


def _flow_resources(
    flow: Flow, topo: ClusterTopology, params: PathModelParams
) -> list[tuple[ResourceKey, float, float]]:
    """(resource, capacity GB/s, weight) triples a flow draws on."""
    assert flow.path is not None
    path = flow.path
    proto = params.for_(flow.protocol)
    out: list[tuple[ResourceKey, float, float]] = []
    for u, v in zip(path[1:-2], path[2:-1], strict=True):
        out.append((("edge", u, v), topo.edge_gbps(u, v) / 8, 1.0))
    if proto.attach_cap is not None:
        out.append((("attach", path[1], "tx"), 1.0, 1.0 / proto.attach_cap))
        out.append((("attach", path[-2], "rx"), 1.0, 1.0 / proto.attach_cap))
    if proto.copy_penalty > 0:
        out.append((("host", flow.src, "tx"), topo.host_link_gbs(flow.src), proto.copy_penalty))
        out.append((("host", flow.dst, "rx"), topo.host_link_gbs(flow.dst), proto.copy_penalty))
    return out


def allocate_rates(
    flows: Iterable[Flow], topo: ClusterTopology, params: PathModelParams | None = None
) -> dict[str, float]:
    """
    Weighted progressive filling.

    All unfrozen flows grow at the same rate until a resource saturates or a
    flow reaches its congestion-control cap; flows on the saturated resource
    freeze. Resources are directed fabric links, per-NIC attach caps and the
    host link weighted by the protocol's copy penalty.
    """
    params = params or PathModelParams()
    flows = list(flows)
    capacity: dict[ResourceKey, float] = {}
    users: dict[ResourceKey, list[tuple[Flow, float]]] = {}
    for flow in flows:
        if flow.path is None:
            raise NoPath(f"flow {flow.id} has no path", details={"flow": flow.id})
        for key, cap, weight in _flow_resources(flow, topo, params):
            if weight <= 0:
                continue
            capacity[key] = cap
            users.setdefault(key, []).append((flow, weight))

    rates = {f.id: 0.0 for f in flows}
    remaining = dict(capacity)
    active = {f.id for f in flows}
    caps = {f.id: f.sender_cc.current_rate for f in flows if f.sender_cc is not None}

    while active:
        step = math.inf
        for key, members in users.items():
            weight = sum(w for f, w in members if f.id in active)
            if weight > 0:
                step = min(step, max(0.0, remaining[key]) / weight)
        for fid, cap in caps.items():
            if fid in active:
                step = min(step, max(0.0, cap - rates[fid]))
        if math.isinf(step):
            raise NoPath("flow without a bounding resource", details={"flows": sorted(active)})

        for fid in active:
            rates[fid] += step
        frozen: set[str] = set()
        for key, members in users.items():
            weight = sum(w for f, w in members if f.id in active)
            if weight <= 0:
                continue
            remaining[key] -= step * weight
            if remaining[key] <= FILL_EPSILON * max(1.0, capacity[key]):
                frozen.update(f.id for f, _ in members if f.id in active)
        for fid, cap in caps.items():
            if fid in active and rates[fid] >= cap - FILL_EPSILON:
                frozen.add(fid)
        active -= frozen

    for flow in flows:
        flow.allocated_rate = rates[flow.id]
    violations = check_flow_conservation(flows, topo)
    if violations:
        raise AssertionError(f"flow conservation violated: {violations}")
    return rates


def check_flow_conservation(flows: Iterable[Flow], topo: ClusterTopology) -> list[str]:
    load: dict[tuple[str, str], float] = {}
    for flow in flows:
        if flow.path is None:
            continue
        for u, v in zip(flow.path[1:-2], flow.path[2:-1], strict=True):
            load[u, v] = load.get((u, v), 0.0) + flow.allocated_rate
    return [
        f"{u}->{v}"
        for (u, v), total in sorted(load.items())
        if total > topo.edge_gbps(u, v) / 8 * (1 + 1e-9) + FILL_EPSILON
    ]


# === Queues and congestion control ===


class ECNAction(StrEnum):
    NONE = "none"
    MARK = "mark"
    DROP = "drop"


@dataclass
class PortQueue:
    capacity: int
    kmin: int
    kmax: int
    pmax: float
    occupancy: float = 0.0
    drops: int = 0
    ecn_marks: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.kmin < self.kmax <= self.capacity:
            raise ValueError("queue thresholds must satisfy 0 < kmin < kmax <= capacity")

    def mark_probability(self) -> float:
        if self.occupancy < self.kmin:
            return 0.0
        if self.occupancy >= self.kmax:
            return 1.0
        return self.pmax * (self.occupancy - self.kmin) / (self.kmax - self.kmin)


def ecn_decision(queue: PortQueue, arriving_bytes: float, stream: RngStream) -> ECNAction:
    """WRED marking with tail drop when the buffer would overflow."""
    if queue.occupancy + arriving_bytes > queue.capacity:
        return ECNAction.DROP
    p = queue.mark_probability()
    if p <= 0.0:
        return ECNAction.NONE
    if p >= 1.0 or stream.random() < p:
        return ECNAction.MARK
    return ECNAction.NONE


def on_cnp_received(cc: CongestionState, params: DcqcnConfig, now: float = 0.0) -> CongestionState:
    alpha = (1 - params.g) * cc.alpha + params.g
    rate = max(params.min_rate, cc.current_rate * (1 - alpha / 2))
    return replace(cc, alpha=alpha, current_rate=rate, last_cnp_time=now, recovery_stage=0)


def recover_rate(cc: CongestionState, dt_since_cnp: float, params: DcqcnConfig) -> CongestionState:
    """
    One recovery step per elapsed period: alpha decays, then the rate moves
    halfway to the target (fast recovery) and, after the fast-recovery
    stages, the target itself grows additively up to line rate.
    """
    periods = int(dt_since_cnp // params.recovery_period)
    state = cc
    for _ in range(periods):
        alpha = state.alpha * (1 - params.g)
        target = state.target_rate
        if state.recovery_stage >= params.fast_recovery_stages:
            target = min(state.line_rate, target + params.additive_increase)
        rate = min(state.line_rate, (state.current_rate + target) / 2)
        state = replace(
            state,
            alpha=alpha,
            target_rate=target,
            current_rate=rate,
            recovery_stage=state.recovery_stage + 1,
        )
    return state


# === Path models ===


@dataclass(frozen=True, slots=True)
class PathCap:
    bandwidth: float  # GB/s
    per_message_overhead: float  # seconds


def path_model_cap(
    protocol: Transport | str, node: NodeSpec, params: PathModelParams | None = None
) -> PathCap:
    """
    Per-NIC bandwidth ceiling of a data path.

    TCP crosses the CPU to NIC link twice, RoCE once, GDR not at all.
    """
    proto = (params or PathModelParams()).for_(protocol)
    limits = [node.nic_bw_gbps / 8]
    if proto.attach_cap is not None:
        limits.append(proto.attach_cap)
    if proto.copy_penalty > 0:
        limits.append(node.host_link_bw / proto.copy_penalty)
    return PathCap(min(limits), proto.per_message_overhead)


class Network:
    """
    Path cache and rate queries over a live topology.
    """

    def __init__(
        self, topo: ClusterTopology, config: NetworkConfig | None = None, salt: int = 0
    ) -> None:
        self.topo = topo
        self.config = config or NetworkConfig()
        self.salt = salt
        self._paths: dict[tuple[str, str, str | None, str | None], list[list[str]]] = {}
        self._version = topo.version
        self.last_allocation: list[Flow] = []

    @property
    def params(self) -> PathModelParams:
        return self.config.paths

    def on_topology_changed(self, delta: TopologyDelta | None = None) -> None:
        self._paths.clear()
        self._version = self.topo.version

    def paths(
        self, src: str, dst: str, src_nic: str | None = None, dst_nic: str | None = None
    ) -> list[list[str]]:
        if self._version != self.topo.version:
            self.on_topology_changed()
        key = (src, dst, src_nic, dst_nic)
        if key not in self._paths:
            self._paths[key] = equal_cost_paths(self.topo, src, dst, src_nic, dst_nic)
        return self._paths[key]

    def select_path(self, flow: Flow) -> list[str]:
        flow.path = select_path_ecmp(
            flow,
            self.topo,
            self.salt,
            self.paths(flow.src, flow.dst, flow.src_nic, flow.dst_nic),
        )
        return flow.path

    def allocate(self, flows: Sequence[Flow]) -> dict[str, float]:
        for flow in flows:
            self.select_path(flow)
        rates = allocate_rates(flows, self.topo, self.params)
        self.last_allocation = list(flows)
        return rates

    def path_latency(self, path: Sequence[str]) -> float:
        graph = self.topo.graph
        links = sum(graph.edges[u, v]["latency"] for u, v in zip(path, path[1:], strict=False))
        switching = sum(
            self.topo.switches[n].forwarding_latency for n in path if self.topo.is_switch(n)
        )
        return float(links + switching)

    def hop_latency(self, protocol: Transport | str, path: Sequence[str]) -> float:
        return self.params.for_(protocol).per_message_overhead + self.path_latency(path)

    def representative_latency(self, protocol: Transport | str, src: str, dst: str) -> float:
        if src == dst:
            return self.config.nvlink_latency
        return self.hop_latency(protocol, self.paths(src, dst)[0])

    def nic_rate(self, nic: str, protocol: Transport | str) -> float:
        """Live GB/s a NIC can source for one protocol."""
        live = self.topo.nic_gbps(nic) / 8
        cap = self.params.for_(protocol).attach_cap
        return min(live, cap) if cap is not None else live

    def host_rate(self, host: str, protocol: Transport | str) -> float:
        penalty = self.params.for_(protocol).copy_penalty
        if penalty <= 0:
            return math.inf
        return self.topo.host_link_gbs(host) / penalty

    def run_flows(self, flows: Sequence[Flow]) -> dict[str, float]:
        """
        Fluid execution: allocate, advance to the next completion, remove the
        finished flow, reallocate. Returns completion time per flow.
        """
        active = [f for f in flows if f.remaining > 0]
        done = {f.id: 0.0 for f in flows if f.remaining <= 0}
        now = 0.0
        while active:
            self.allocate(active)
            stalled = sorted(f.id for f in active if f.allocated_rate <= 0)
            if stalled:
                raise NoPath("flows have no live capacity", details={"flows": stalled})
            step = min(f.remaining / f.allocated_rate / 1e9 for f in active)
            now += step
            still = []
            for f in active:
                f.bytes_done = min(f.bytes_total, f.bytes_done + f.allocated_rate * 1e9 * step)
                if f.remaining <= f.bytes_total * 1e-12:
                    f.bytes_done = f.bytes_total
                    done[f.id] = now
                else:
                    still.append(f)
            active = still
        return done


# === Incast study ===


@dataclass
class IncastResult:
    drops: int
    marks: int
    cnps: int
    max_queue: float
    delivered_bytes: float
    queue_series: list[tuple[float, float]] = field(default_factory=list)
    rate_series: list[tuple[float, float]] = field(default_factory=list)


def simulate_incast(
    incast: IncastConfig,
    network: NetworkConfig,
    stream: RngStream,
    *,
    port_bw_gbps: float = 100.0,
    buffer_per_port: int = 8 * 1024 * 1024,
) -> IncastResult:
    """
    N senders at line rate into one egress port, integrated on a fixed step.

    The receiver returns at most one CNP per sender per ``cnp_interval``;
    CNPs arrive after a fixed latency and are never queued.
    """
    dcqcn = network.dcqcn
    line = port_bw_gbps / 8
    drain = line * 1e9 * incast.dt
    queue = PortQueue(
        capacity=buffer_per_port,
        kmin=network.ecn.kmin,
        kmax=network.ecn.kmax,
        pmax=network.ecn.pmax,
    )
    stall = network.paths.for_(incast.protocol).loss_stall_rtts * incast.rtt
    senders = [
        CongestionState(
            current_rate=line, target_rate=line, line_rate=line, alpha=dcqcn.initial_alpha
        )
        for _ in range(incast.senders)
    ]
    stalled_until = [0.0] * incast.senders
    next_recovery = [math.inf] * incast.senders
    last_cnp_sent = [-math.inf] * incast.senders
    in_flight: deque[tuple[float, int]] = deque()
    result = IncastResult(drops=0, marks=0, cnps=0, max_queue=0.0, delivered_bytes=0.0)

    steps = int(round(incast.duration / incast.dt))
    for step in range(steps):
        t = step * incast.dt
        while in_flight and in_flight[0][0] <= t + 1e-15:
            _, s = in_flight.popleft()
            senders[s] = on_cnp_received(senders[s], dcqcn, t)
            next_recovery[s] = t + dcqcn.recovery_period
        for s in range(incast.senders):
            if t >= next_recovery[s]:
                senders[s] = recover_rate(senders[s], dcqcn.recovery_period, dcqcn)
                next_recovery[s] += dcqcn.recovery_period

        for s in range(incast.senders):
            if t < stalled_until[s]:
                continue
            arriving = senders[s].current_rate * 1e9 * incast.dt
            action = ecn_decision(queue, arriving, stream)
            if action is ECNAction.DROP:
                excess = queue.occupancy + arriving - queue.capacity
                queue.drops += max(1, math.ceil(excess / incast.mtu))
                queue.occupancy = float(queue.capacity)
                stalled_until[s] = t + stall
                continue
            if action is ECNAction.MARK:
                queue.ecn_marks += 1
                if incast.congestion_control and t - last_cnp_sent[s] >= dcqcn.cnp_interval:
                    last_cnp_sent[s] = t
                    in_flight.append((t + dcqcn.cnp_latency, s))
                    result.cnps += 1
            queue.occupancy += arriving

        served = min(queue.occupancy, drain)
        queue.occupancy -= served
        result.delivered_bytes += served
        result.max_queue = max(result.max_queue, queue.occupancy)
        if step % incast.sample_every == 0:
            result.queue_series.append((t, queue.occupancy))
            result.rate_series.append((t, sum(c.current_rate for c in senders)))

    result.drops = queue.drops
    result.marks = queue.ecn_marks
    log.debug(
        "incast_done",
        drops=result.drops,
        marks=result.marks,
        max_queue=result.max_queue,
        congestion_control=incast.congestion_control,
    )
    return result


class NetworkExtension(BaseExtension):
    """
    Registers the :class:`Network` service and keeps its path cache in step
    with topology changes.
    """

    def startup(self, registry: svcs.Registry, sim: Simulation) -> dict[str, Any]:
        config = sim.scenario.network
        salt = config.ecmp_salt
        if salt is None:
            salt = sim.stream("ecmp").integers(1 << 31)

        def factory(svcs_container: svcs.Container) -> Network:
            return Network(svcs_container.get(ClusterTopology), config, salt)

        def ping(network: Network) -> None:
            violations = check_flow_conservation(network.last_allocation, network.topo)
            assert not violations, f"links over capacity: {violations}"

        registry.register_factory(Network, factory, ping=ping)
        sim.subscribe("topology_changed", lambda delta: sim.get(Network).on_topology_changed(delta))
        return {}

    def summary(self, sim: Simulation) -> dict[str, Any]:
        config = sim.scenario.network
        return {"mode": config.mode, "ecmp_salt_set": config.ecmp_salt is not None}
