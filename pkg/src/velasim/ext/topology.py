"""
Cluster topologies.

Two builders are provided: a Vela-style two-level Clos where every NIC has
two ports homed on two different top-of-rack switches, and a Blue Vela-style
rail-optimized fat tree built from scalable units. Both produce a
:class:`ClusterTopology` wrapping a ``networkx.DiGraph`` with one directed
edge per direction of each physical link. Capacities on edges are in Gb/s.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Any, Literal

import networkx as nx
import structlog
import svcs
import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from ..core.exceptions import InfeasibleRadix, UnknownComponent
from ..core.extensions import BaseExtension

if TYPE_CHECKING:
    from ..core.application import Simulation

log = structlog.stdlib.get_logger("velasim.topology")

HOST = "host"
NIC = "nic"
STORAGE = "storage"
SWITCH_ROLES = ("tor", "spine", "leaf", "core")


class NodeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gpus_per_node: PositiveInt = 8
    gpu_peak_tflops: PositiveFloat = 312.0
    gpu_power_max: PositiveFloat = 400.0  # W
    gpu_power_min: PositiveFloat = 150.0  # W
    nvlink_bw: PositiveFloat = 300.0  # GB/s
    host_link_bw: PositiveFloat = 24.0  # GB/s, CPU to NIC
    nic_count: PositiveInt = 4
    ports_per_nic: PositiveInt = 2
    nic_port_bw: PositiveFloat = 100.0  # Gb/s
    dram: PositiveFloat = 1536.0  # GB
    local_nvme: PositiveFloat = 8000.0  # GB
    virt_overhead: float = Field(default=0.05, ge=0.0, le=0.5)

    @model_validator(mode="after")
    def _power_ordered(self) -> NodeSpec:
        if self.gpu_power_min >= self.gpu_power_max:
            raise ValueError("gpu_power_min must be below gpu_power_max")
        return self

    @property
    def nic_bw_gbps(self) -> float:
        return self.ports_per_nic * self.nic_port_bw

    def gpu_nic(self, gpu: int) -> int:
        """NIC index closest to a local GPU index."""
        return gpu * self.nic_count // self.gpus_per_node


class SwitchSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    role: Literal["tor", "spine", "leaf", "core"]
    port_count: PositiveInt = 64
    port_bw: PositiveFloat = 100.0  # Gb/s
    buffer_per_port: PositiveInt = 8 * 1024 * 1024  # bytes
    forwarding_latency: float = Field(default=0.3e-6, ge=0.0)


class TopologyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    builder: Literal["vela", "fat_tree"] = "vela"
    # vela
    racks: PositiveInt = 2
    servers_per_rack: PositiveInt = 6
    spines: PositiveInt = 4
    uplinks_per_spine: PositiveInt = 2
    # fat tree
    su_count: PositiveInt = 4
    nodes_per_su: PositiveInt = 32
    rails: int = 8
    storage_ports: int = Field(default=2, ge=0)
    storage_port_bw: PositiveFloat = 400.0
    # shared
    link_latency: float = Field(default=0.05e-6, ge=0.0)
    tor: SwitchSpec = SwitchSpec(role="tor", port_count=64, port_bw=100.0)
    spine: SwitchSpec = SwitchSpec(role="spine", port_count=128, port_bw=100.0)
    leaf: SwitchSpec = SwitchSpec(role="leaf", port_count=64, port_bw=400.0)


class DeltaChange(StrEnum):
    LINK_DOWN = "link_down"
    LINK_UP = "link_up"
    BW_SCALE = "bw_scale"


@dataclass(frozen=True, slots=True)
class TopologyDelta:
    component: str
    change: DeltaChange
    factor: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.factor <= 1.0:
            raise ValueError(f"bw_scale factor must be in (0, 1], got {self.factor}")


type TopologyListener = Callable[[TopologyDelta], None]


@dataclass
class ClusterTopology:
    kind: Literal["vela", "fat_tree"]
    graph: nx.DiGraph
    node_spec: NodeSpec
    hosts: list[str]
    switches: dict[str, SwitchSpec]
    links: dict[str, tuple[str, str]]
    racks: dict[str, list[str]]
    rails: dict[int, list[str]] = field(default_factory=dict)
    scalable_units: dict[str, list[str]] = field(default_factory=dict)
    host_scale: dict[str, float] = field(default_factory=dict)
    link_latency: float = 0.05e-6
    cross_rack_label: str | None = None
    version: int = 0
    _listeners: list[TopologyListener] = field(default_factory=list, repr=False)

    def add_listener(self, listener: TopologyListener) -> None:
        self._listeners.append(listener)

    def notify(self, delta: TopologyDelta) -> None:
        self.version += 1
        for listener in self._listeners:
            listener(delta)

    # --- lookups ---

    def rack_of(self, host: str) -> str:
        return str(self.graph.nodes[host]["rack"])

    def nics(self, host: str) -> list[str]:
        found = [n for n in self.graph.adj[host] if self.graph.nodes[n].get("kind") == NIC]
        return sorted(found, key=lambda n: self.graph.nodes[n]["index"])

    def host_of(self, nic: str) -> str:
        return str(self.graph.nodes[nic]["host"])

    def ports(self, nic: str) -> list[tuple[str, str, dict[str, Any]]]:
        """Port edges leaving a NIC, in port order."""
        edges = [
            (nic, sw, data)
            for sw, data in self.graph.adj[nic].items()
            if data.get("port") is not None
        ]
        return sorted(edges, key=lambda e: e[2]["port"])

    def is_switch(self, name: str) -> bool:
        return name in self.switches

    def switch_up(self, name: str) -> bool:
        return bool(self.graph.nodes[name].get("up", True))

    def edge_live(self, u: str, v: str) -> bool:
        data = self.graph.edges[u, v]
        if not data["up"]:
            return False
        return all(self.switch_up(n) for n in (u, v) if n in self.switches)

    def edge_gbps(self, u: str, v: str, *, nominal: bool = False) -> float:
        """Live capacity of a directed edge in Gb/s, or its wired capacity if ``nominal``."""
        data = self.graph.edges[u, v]
        if nominal:
            return float(data["capacity"])
        if not self.edge_live(u, v):
            return 0.0
        return float(data["capacity"] * data["scale"])

    def nic_gbps(self, nic: str, *, nominal: bool = False) -> float:
        return sum(self.edge_gbps(u, v, nominal=nominal) for u, v, _ in self.ports(nic))

    def injection_gbps(self, host: str, *, nominal: bool = False) -> float:
        return sum(self.nic_gbps(nic, nominal=nominal) for nic in self.nics(host))

    def host_link_gbs(self, host: str) -> float:
        """Effective CPU to NIC bandwidth of a host in GB/s."""
        return self.node_spec.host_link_bw * self.host_scale.get(host, 1.0)

    def components(self) -> list[str]:
        return [*self.links, *self.switches, *(f"{h}/pcie" for h in self.hosts)]

    def state(self) -> tuple[Any, ...]:
        """Hashable snapshot of all mutable link, switch and host state."""
        edges = tuple(
            sorted((u, v, d["up"], d["scale"]) for u, v, d in self.graph.edges(data=True))
        )
        switches = tuple(sorted((s, self.switch_up(s)) for s in self.switches))
        hosts = tuple(sorted(self.host_scale.items()))
        return edges, switches, hosts


def _add_link(
    graph: nx.DiGraph,
    links: dict[str, tuple[str, str]],
    link_id: str,
    a: str,
    b: str,
    capacity: float,
    latency: float,
    *,
    port: int | None = None,
    lanes: int = 1,
) -> None:
    attrs = {
        "capacity": capacity,
        "scale": 1.0,
        "up": True,
        "link_id": link_id,
        "latency": latency,
        "lanes": lanes,
    }
    graph.add_edge(a, b, **attrs, port=port)
    graph.add_edge(b, a, **attrs, port=None)
    links[link_id] = (a, b)


def _add_host(
    graph: nx.DiGraph,
    links: dict[str, tuple[str, str]],
    host: str,
    spec: NodeSpec,
    latency: float,
    **attrs: Any,
) -> list[str]:
    graph.add_node(host, kind=HOST, nic_count=spec.nic_count, **attrs)
    nics = []
    for k in range(spec.nic_count):
        nic = f"{host}/nic{k}"
        graph.add_node(nic, kind=NIC, host=host, index=k)
        _add_link(graph, links, f"{nic}/attach", host, nic, spec.nic_bw_gbps, 0.0)
        nics.append(nic)
    return nics


def build_vela_topology(
    racks: int,
    servers_per_rack: int = 6,
    nics: int = 4,
    spines: int = 4,
    *,
    node: NodeSpec | None = None,
    uplinks_per_spine: int = 2,
    tor: SwitchSpec | None = None,
    spine: SwitchSpec | None = None,
    link_latency: float = 0.05e-6,
) -> ClusterTopology:
    """
    Two-level Clos. Port ``p`` of every NIC attaches to TOR ``p`` of its rack,
    so a dual-port NIC is homed on two TORs. Every TOR has
    ``uplinks_per_spine`` links to every spine.
    """
    if min(racks, servers_per_rack, nics, spines, uplinks_per_spine) <= 0:
        raise InfeasibleRadix(
            "racks, servers_per_rack, nics, spines must be positive",
            details={"racks": racks, "servers_per_rack": servers_per_rack, "nics": nics},
        )
    spec = (node or NodeSpec()).model_copy(update={"nic_count": nics})
    tor_spec = tor or SwitchSpec(role="tor", port_count=64, port_bw=spec.nic_port_bw)
    spine_spec = spine or SwitchSpec(role="spine", port_count=128, port_bw=spec.nic_port_bw)
    tors_per_rack = spec.ports_per_nic

    tor_ports = servers_per_rack * nics + spines * uplinks_per_spine
    if tor_ports > tor_spec.port_count:
        raise InfeasibleRadix(
            f"TOR needs {tor_ports} ports, has {tor_spec.port_count}",
            details={"needed": tor_ports, "available": tor_spec.port_count},
        )
    spine_ports = racks * tors_per_rack * uplinks_per_spine
    if spine_ports > spine_spec.port_count:
        raise InfeasibleRadix(
            f"spine needs {spine_ports} ports, has {spine_spec.port_count}",
            details={"needed": spine_ports, "available": spine_spec.port_count},
        )

    graph = nx.DiGraph()
    links: dict[str, tuple[str, str]] = {}
    switches: dict[str, SwitchSpec] = {}
    rack_map: dict[str, list[str]] = {}
    hosts: list[str] = []

    spine_names = [f"spine{s:02d}" for s in range(spines)]
    for name in spine_names:
        graph.add_node(name, kind="spine", up=True)
        switches[name] = spine_spec

    for r in range(racks):
        rack = f"rack{r:02d}"
        tors = [f"{rack}-tor{p}" for p in range(tors_per_rack)]
        for name in tors:
            graph.add_node(name, kind="tor", rack=rack, up=True)
            switches[name] = tor_spec
            for s in spine_names:
                _add_link(
                    graph,
                    links,
                    f"{name}~{s}",
                    name,
                    s,
                    uplinks_per_spine * spine_spec.port_bw,
                    link_latency,
                    lanes=uplinks_per_spine,
                )
        rack_map[rack] = []
        for i in range(servers_per_rack):
            host = f"node{r * servers_per_rack + i:04d}"
            for nic in _add_host(graph, links, host, spec, link_latency, rack=rack):
                for p, tor_name in enumerate(tors):
                    _add_link(
                        graph,
                        links,
                        f"{nic}/p{p}",
                        nic,
                        tor_name,
                        spec.nic_port_bw,
                        link_latency,
                        port=p,
                    )
            rack_map[rack].append(host)
            hosts.append(host)

    topo = ClusterTopology(
        kind="vela",
        graph=graph,
        node_spec=spec,
        hosts=hosts,
        switches=switches,
        links=links,
        racks=rack_map,
        link_latency=link_latency,
        cross_rack_label="1.6TBps",
    )
    log.debug("vela_topology_built", racks=racks, hosts=len(hosts), spines=spines)
    return topo


def _spines_per_plane(su_count: int, nodes_per_su: int, radix: int) -> int:
    spines = max(1, math.ceil(su_count * nodes_per_su / radix))
    while spines <= nodes_per_su:
        if nodes_per_su % spines == 0 and su_count * (nodes_per_su // spines) <= radix:
            return spines
        spines += 1
    raise InfeasibleRadix(
        "no spine count satisfies the radix",
        details={"su_count": su_count, "nodes_per_su": nodes_per_su, "radix": radix},
    )


def build_fat_tree(
    su_count: int,
    nodes_per_su: int = 32,
    rails: int = 8,
    *,
    node: NodeSpec | None = None,
    leaf: SwitchSpec | None = None,
    servers_per_rack: int = 4,
    storage_ports: int = 2,
    storage_port_bw: float = 400.0,
    link_latency: float = 0.05e-6,
) -> ClusterTopology:
    """
    Rail-optimized non-blocking fat tree.

    NIC ``r`` of every node in a scalable unit attaches to that unit's leaf
    for rail ``r``. Each rail has its own spine plane sized so leaf uplink
    capacity equals downlink capacity. A single scalable unit needs no spines.
    """
    if rails <= 0 or su_count <= 0 or nodes_per_su <= 0:
        raise InfeasibleRadix(
            "su_count, nodes_per_su and rails must be positive",
            details={"su_count": su_count, "nodes_per_su": nodes_per_su, "rails": rails},
        )
    leaf_spec = leaf or SwitchSpec(role="leaf", port_count=64, port_bw=400.0)
    spec = (node or NodeSpec(nic_port_bw=leaf_spec.port_bw)).model_copy(
        update={"nic_count": rails, "ports_per_nic": 1, "nic_port_bw": leaf_spec.port_bw}
    )
    radix = leaf_spec.port_count
    uplinks = nodes_per_su if su_count > 1 else 0
    if nodes_per_su + uplinks > radix:
        raise InfeasibleRadix(
            f"leaf needs {nodes_per_su + uplinks} ports, has {radix}",
            details={"needed": nodes_per_su + uplinks, "available": radix},
        )
    spines_per_plane = _spines_per_plane(su_count, nodes_per_su, radix) if su_count > 1 else 0
    lanes = nodes_per_su // spines_per_plane if spines_per_plane else 0
    spine_spec = leaf_spec.model_copy(update={"role": "spine"})

    graph = nx.DiGraph()
    links: dict[str, tuple[str, str]] = {}
    switches: dict[str, SwitchSpec] = {}
    rail_map: dict[int, list[str]] = {r: [] for r in range(rails)}
    units: dict[str, list[str]] = {}
    rack_map: dict[str, list[str]] = {}
    hosts: list[str] = []

    if storage_ports:
        graph.add_node(STORAGE, kind=STORAGE)

    for r in range(rails):
        for k in range(spines_per_plane):
            name = f"rail{r}-spine{k:02d}"
            graph.add_node(name, kind="spine", rail=r, up=True)
            switches[name] = spine_spec

    for s in range(su_count):
        su = f"su{s}"
        units[su] = []
        for r in range(rails):
            name = f"{su}-leaf{r}"
            graph.add_node(name, kind="leaf", su=su, rail=r, up=True)
            switches[name] = leaf_spec
            rail_map[r].append(name)
            for k in range(spines_per_plane):
                spine_name = f"rail{r}-spine{k:02d}"
                _add_link(
                    graph,
                    links,
                    f"{name}~{spine_name}",
                    name,
                    spine_name,
                    lanes * leaf_spec.port_bw,
                    link_latency,
                    lanes=lanes,
                )
        for i in range(nodes_per_su):
            index = s * nodes_per_su + i
            host = f"node{index:04d}"
            rack = f"{su}-rack{i // servers_per_rack:02d}"
            rack_map.setdefault(rack, []).append(host)
            nics = _add_host(graph, links, host, spec, link_latency, rack=rack, su=su)
            for r, nic in enumerate(nics):
                _add_link(
                    graph,
                    links,
                    f"{nic}/p0",
                    nic,
                    f"{su}-leaf{r}",
                    spec.nic_port_bw,
                    link_latency,
                    port=0,
                )
            if storage_ports:
                _add_link(
                    graph,
                    links,
                    f"{host}/storage",
                    host,
                    STORAGE,
                    storage_ports * storage_port_bw,
                    link_latency,
                    lanes=storage_ports,
                )
            units[su].append(host)
            hosts.append(host)

    topo = ClusterTopology(
        kind="fat_tree",
        graph=graph,
        node_spec=spec,
        hosts=hosts,
        switches=switches,
        links=links,
        racks=rack_map,
        rails=rail_map,
        scalable_units=units,
        link_latency=link_latency,
    )
    log.debug(
        "fat_tree_built", su_count=su_count, hosts=len(hosts), spines_per_plane=spines_per_plane
    )
    return topo


def build_topology(config: TopologyConfig, node: NodeSpec | None = None) -> ClusterTopology:
    if config.builder == "vela":
        spec = node or NodeSpec()
        return build_vela_topology(
            config.racks,
            config.servers_per_rack,
            spec.nic_count,
            config.spines,
            node=spec,
            uplinks_per_spine=config.uplinks_per_spine,
            tor=config.tor,
            spine=config.spine,
            link_latency=config.link_latency,
        )
    return build_fat_tree(
        config.su_count,
        config.nodes_per_su,
        config.rails,
        node=node,
        leaf=config.leaf,
        servers_per_rack=config.servers_per_rack,
        storage_ports=config.storage_ports,
        storage_port_bw=config.storage_port_bw,
        link_latency=config.link_latency,
    )


def bisection_gbps(topo: ClusterTopology) -> float:
    """Total live uplink capacity out of the first switch tier."""
    lower = {"tor", "leaf"}
    return sum(
        topo.edge_gbps(u, v)
        for u, v, data in topo.graph.edges(data=True)
        if topo.graph.nodes[u].get("kind") in lower and topo.graph.nodes[v].get("kind") == "spine"
    )


# === Mutation ===


def apply_delta(topo: ClusterTopology, delta: TopologyDelta) -> ClusterTopology:
    """
    Apply a link, switch or host-link change in place and notify listeners.

    ``bw_scale`` sets an absolute scale, so ``bw_scale(1.0)`` restores the
    nominal bandwidth.
    """
    component = delta.component
    if component in topo.links:
        a, b = topo.links[component]
        for u, v in ((a, b), (b, a)):
            _change_edge(topo.graph.edges[u, v], delta)
    elif component in topo.switches:
        node = topo.graph.nodes[component]
        if delta.change is DeltaChange.BW_SCALE:
            for u, v in [*topo.graph.in_edges(component), *topo.graph.out_edges(component)]:
                _change_edge(topo.graph.edges[u, v], delta)
        else:
            node["up"] = delta.change is DeltaChange.LINK_UP
    elif component.endswith("/pcie") and component.removesuffix("/pcie") in topo.graph:
        host = component.removesuffix("/pcie")
        match delta.change:
            case DeltaChange.LINK_DOWN:
                topo.host_scale[host] = 0.0
            case DeltaChange.LINK_UP:
                topo.host_scale.pop(host, None)
            case DeltaChange.BW_SCALE:
                if delta.factor == 1.0:
                    topo.host_scale.pop(host, None)
                else:
                    topo.host_scale[host] = delta.factor
    else:
        raise UnknownComponent(
            f"unknown component {component!r}", details={"component": component}
        )
    log.debug("topology_delta", component=component, change=str(delta.change), factor=delta.factor)
    topo.notify(delta)
    return topo


def _change_edge(data: dict[str, Any], delta: TopologyDelta) -> None:
    match delta.change:
        case DeltaChange.LINK_DOWN:
            data["up"] = False
        case DeltaChange.LINK_UP:
            data["up"] = True
        case DeltaChange.BW_SCALE:
            data["scale"] = delta.factor


# === Validation ===


@dataclass(frozen=True, slots=True)
class Finding:
    check: str
    component: str
    message: str


@dataclass
class ValidationReport:
    dual_homed: bool | None
    non_blocking: bool | None
    oversubscription: float | None
    orphans: list[str]
    findings: list[Finding]

    @property
    def ok(self) -> bool:
        return self.dual_homed is not False and self.non_blocking is not False and not self.orphans


def bipartition_max_flow(
    topo: ClusterTopology,
    side_a: Sequence[str],
    side_b: Sequence[str],
    *,
    nominal: bool = False,
) -> tuple[float, float]:
    """
    Exact max-flow from ``side_a`` hosts to ``side_b`` hosts over live links
    (every wired link at full capacity if ``nominal``).

    Returns ``(max_flow_gbps, injection_gbps_of_side_a)``. Hosts never carry
    transit traffic and the storage fabric is excluded.
    """
    source, sink = "__source__", "__sink__"
    a_set, b_set = set(side_a), set(side_b)
    hosts = set(topo.hosts)
    flow_graph = nx.DiGraph()
    for u, v in topo.graph.edges():
        if STORAGE in (u, v):
            continue
        if u in b_set or v in a_set:
            continue
        if (u in hosts and u not in a_set) or (v in hosts and v not in b_set):
            continue
        capacity = topo.edge_gbps(u, v, nominal=nominal)
        if capacity > 0:
            flow_graph.add_edge(u, v, cap=capacity)
    for host in side_a:
        flow_graph.add_edge(source, host)
    for host in side_b:
        flow_graph.add_edge(host, sink)
    injection = sum(topo.injection_gbps(h, nominal=nominal) for h in side_a)
    if source not in flow_graph or sink not in flow_graph:
        return 0.0, injection
    value = nx.maximum_flow_value(flow_graph, source, sink, capacity="cap")
    return float(value), injection


def validate_topology(topo: ClusterTopology, *, nominal: bool = False) -> ValidationReport:
    """
    Check dual-TOR homing (Vela), bisection against injection (fat tree) and
    orphan components. With ``nominal`` the check covers the wiring as built
    and ignores link state and bandwidth scaling.
    """
    findings: list[Finding] = []
    orphans: list[str] = []

    for host in topo.hosts:
        if not topo.nics(host):
            orphans.append(host)
            findings.append(Finding("orphans", host, "node has no NICs"))
    for name in topo.switches:
        if topo.graph.degree(name) == 0:
            orphans.append(name)
            findings.append(Finding("orphans", name, "switch has no links"))

    dual_homed: bool | None = None
    if topo.kind == "vela":
        dual_homed = True
        for host in topo.hosts:
            for nic in topo.nics(host):
                tors = {sw for _, sw, _ in topo.ports(nic) if nominal or topo.edge_live(nic, sw)}
                if len(tors) < 2:
                    dual_homed = False
                    findings.append(
                        Finding("dual_homing", nic, f"NIC reaches {len(tors)} live TOR(s)")
                    )

    non_blocking: bool | None = None
    ratio: float | None = None
    if topo.kind == "fat_tree" and len(topo.hosts) >= 2:
        half = len(topo.hosts) // 2
        flow, injection = bipartition_max_flow(
            topo, topo.hosts[:half], topo.hosts[half : 2 * half], nominal=nominal
        )
        ratio = injection / flow if flow > 0 else math.inf
        non_blocking = flow >= injection * (1 - 1e-9)
        if not non_blocking:
            findings.append(
                Finding(
                    "non_blocking",
                    "bisection",
                    f"max-flow {flow:.0f} Gb/s below injection {injection:.0f} Gb/s",
                )
            )

    return ValidationReport(
        dual_homed=dual_homed,
        non_blocking=non_blocking,
        oversubscription=ratio,
        orphans=orphans,
        findings=findings,
    )


# === Export ===


def describe_topology(topo: ClusterTopology) -> dict[str, Any]:
    nodes = [
        {
            "name": host,
            "rack": topo.rack_of(host),
            "nics": len(topo.nics(host)),
            "injection_gbps": topo.injection_gbps(host),
            "host_link_gbs": topo.host_link_gbs(host),
        }
        for host in topo.hosts
    ]
    switches = [
        {
            "name": name,
            "role": spec.role,
            "ports": spec.port_count,
            "port_gbps": spec.port_bw,
            "up": topo.switch_up(name),
        }
        for name, spec in topo.switches.items()
    ]
    links = []
    for link_id, (a, b) in topo.links.items():
        data = topo.graph.edges[a, b]
        links.append(
            {
                "id": link_id,
                "a": a,
                "b": b,
                "gbps": data["capacity"],
                "scale": data["scale"],
                "up": data["up"],
            }
        )
    return {
        "kind": topo.kind,
        "node_spec": topo.node_spec.model_dump(),
        "bisection_gbps": bisection_gbps(topo),
        "cross_rack_label": topo.cross_rack_label,
        "nodes": nodes,
        "switches": switches,
        "links": links,
    }


def topology_to_yaml(topo: ClusterTopology) -> str:
    return yaml.safe_dump(describe_topology(topo), sort_keys=False)


class TopologyExtension(BaseExtension):
    """
    Builds the cluster topology from the scenario and registers it.

    Topology changes are republished on the simulation bus as
    ``topology_changed`` so other subsystems can re-resolve state.
    """

    def startup(self, registry: svcs.Registry, sim: Simulation) -> dict[str, Any]:
        scenario = sim.scenario
        topo = build_topology(scenario.topology, scenario.node)
        topo.add_listener(lambda delta: sim.publish("topology_changed", delta=delta))

        def ping(topo: ClusterTopology) -> None:
            report = validate_topology(topo, nominal=True)
            assert report.ok, "; ".join(
                f"{f.check} {f.component}: {f.message}" for f in report.findings
            )

        registry.register_value(ClusterTopology, topo, ping=ping)
        log.info("topology_ready", kind=topo.kind, hosts=len(topo.hosts))
        return {"topology": topo}

    def summary(self, sim: Simulation) -> dict[str, Any]:
        topo = sim.get(ClusterTopology)
        report = validate_topology(topo)
        return {
            "kind": topo.kind,
            "hosts": len(topo.hosts),
            "switches": len(topo.switches),
            "bisection_gbps": bisection_gbps(topo),
            "cross_rack_label": topo.cross_rack_label,
            "valid": report.ok,
        }
