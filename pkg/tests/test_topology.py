import pytest
import yaml

from velasim.core.exceptions import InfeasibleRadix, UnknownComponent
from velasim.ext.topology import (
    DeltaChange,
    NodeSpec,
    TopologyConfig,
    TopologyDelta,
    apply_delta,
    bipartition_max_flow,
    bisection_gbps,
    build_fat_tree,
    build_topology,
    build_vela_topology,
    describe_topology,
    topology_to_yaml,
    validate_topology,
)


def test_node_spec_defaults(node):
    assert node.nic_bw_gbps == 200.0
    assert node.gpu_nic(0) == 0
    assert node.gpu_nic(7) == 3


def test_node_spec_power_must_be_ordered():
    with pytest.raises(ValueError):
        NodeSpec(gpu_power_min=400, gpu_power_max=150)


def test_vela_layout(vela):
    assert len(vela.hosts) == 12
    assert vela.hosts[0] == "node0000"
    assert vela.racks["rack01"][0] == "node0006"
    assert {"rack00-tor0", "rack00-tor1", "spine00", "spine03"} <= set(vela.switches)
    assert vela.cross_rack_label == "1.6TBps"
    assert vela.nics("node0000") == [f"node0000/nic{k}" for k in range(4)]


def test_vela_nics_are_dual_homed(vela):
    for host in vela.hosts:
        for nic in vela.nics(host):
            tors = [sw for _, sw, _ in vela.ports(nic)]
            assert len(tors) == 2
            assert len(set(tors)) == 2
            assert all(t.startswith(vela.rack_of(host)) for t in tors)


def test_vela_injection_and_bisection(vela):
    # 4 NICs x 2 ports x 100 Gb/s
    assert vela.injection_gbps("node0000") == 800.0
    # 2 racks x 2 TORs x 4 spines x 2 uplinks x 100 Gb/s
    assert bisection_gbps(vela) == 3200.0


def test_vela_radix_limits():
    with pytest.raises(InfeasibleRadix):
        build_vela_topology(2, servers_per_rack=15)
    with pytest.raises(InfeasibleRadix):
        build_vela_topology(33)
    with pytest.raises(InfeasibleRadix):
        build_vela_topology(0)


def test_fat_tree_layout(fat_tree):
    assert len(fat_tree.hosts) == 8
    assert fat_tree.scalable_units["su1"][0] == "node0004"
    assert fat_tree.rails[0] == ["su0-leaf0", "su1-leaf0"]
    assert "rail1-spine00" in fat_tree.switches
    assert "storage" in fat_tree.graph
    assert fat_tree.node_spec.ports_per_nic == 1
    assert fat_tree.injection_gbps("node0000") == 800.0


def test_single_unit_fat_tree_has_no_spines():
    topo = build_fat_tree(1, nodes_per_su=8, rails=4)

    assert all(spec.role == "leaf" for spec in topo.switches.values())


def test_fat_tree_is_non_blocking(fat_tree):
    report = validate_topology(fat_tree)

    assert report.non_blocking is True
    assert report.oversubscription == pytest.approx(1.0)
    assert report.ok


def test_fat_tree_leaf_radix():
    with pytest.raises(InfeasibleRadix):
        build_fat_tree(2, nodes_per_su=40)


def test_vela_validates(vela):
    report = validate_topology(vela)

    assert report.dual_homed is True
    assert report.non_blocking is None
    assert report.orphans == []
    assert report.ok


def test_port_down_breaks_dual_homing(vela):
    apply_delta(vela, TopologyDelta("node0000/nic0/p1", DeltaChange.LINK_DOWN))

    report = validate_topology(vela)

    assert report.dual_homed is False
    assert report.findings[0].component == "node0000/nic0"
    assert vela.nic_gbps("node0000/nic0") == 100.0


def test_nominal_validation_ignores_link_state(vela, fat_tree):
    apply_delta(vela, TopologyDelta("node0000/nic0/p1", DeltaChange.LINK_DOWN))
    apply_delta(fat_tree, TopologyDelta("su0-leaf0~rail0-spine00", DeltaChange.LINK_DOWN))

    assert validate_topology(vela, nominal=True).ok
    assert validate_topology(fat_tree, nominal=True).non_blocking is True


def test_spine_uplink_failure_makes_fat_tree_blocking(fat_tree):
    apply_delta(fat_tree, TopologyDelta("su0-leaf0~rail0-spine00", DeltaChange.LINK_DOWN))

    report = validate_topology(fat_tree)

    assert report.non_blocking is False
    assert not report.ok


def test_bw_scale_and_restore(vela):
    link = "rack00-tor0~spine00"
    a, b = vela.links[link]
    apply_delta(vela, TopologyDelta(link, DeltaChange.BW_SCALE, 0.5))
    assert vela.edge_gbps(a, b) == 100.0
    assert vela.edge_gbps(b, a) == 100.0

    apply_delta(vela, TopologyDelta(link, DeltaChange.BW_SCALE, 1.0))
    assert vela.edge_gbps(a, b) == 200.0


def test_switch_down_takes_its_links_down(vela):
    apply_delta(vela, TopologyDelta("rack00-tor0", DeltaChange.LINK_DOWN))

    assert not vela.switch_up("rack00-tor0")
    assert vela.edge_gbps("node0000/nic0", "rack00-tor0") == 0.0
    assert vela.nic_gbps("node0000/nic0") == 100.0

    apply_delta(vela, TopologyDelta("rack00-tor0", DeltaChange.LINK_UP))
    assert vela.nic_gbps("node0000/nic0") == 200.0


def test_host_link_scale(vela):
    apply_delta(vela, TopologyDelta("node0003/pcie", DeltaChange.BW_SCALE, 0.125))
    assert vela.host_link_gbs("node0003") == 3.0

    apply_delta(vela, TopologyDelta("node0003/pcie", DeltaChange.LINK_UP))
    assert vela.host_link_gbs("node0003") == 24.0


def test_unknown_component(vela):
    with pytest.raises(UnknownComponent):
        apply_delta(vela, TopologyDelta("nowhere", DeltaChange.LINK_DOWN))


@pytest.mark.parametrize("factor", [0.0, -0.5, 1.5])
def test_delta_factor_range(factor):
    with pytest.raises(ValueError):
        TopologyDelta("x", DeltaChange.BW_SCALE, factor)


def test_listeners_see_every_delta(vela):
    seen = []
    vela.add_listener(seen.append)
    delta = TopologyDelta("node0000/nic0/p0", DeltaChange.LINK_DOWN)

    apply_delta(vela, delta)

    assert seen == [delta]
    assert vela.version == 1


def test_state_round_trips_through_down_and_up(vela):
    before = vela.state()
    apply_delta(vela, TopologyDelta("spine01", DeltaChange.LINK_DOWN))
    assert vela.state() != before

    apply_delta(vela, TopologyDelta("spine01", DeltaChange.LINK_UP))
    assert vela.state() == before


def test_bipartition_max_flow_across_racks(vela):
    flow, injection = bipartition_max_flow(vela, vela.racks["rack00"], vela.racks["rack01"])

    assert injection == 6 * 800.0
    # two TORs x 4 spines x 200 Gb/s out of the rack
    assert flow == pytest.approx(1600.0)


def test_components_include_host_links(vela):
    components = vela.components()

    assert "node0000/pcie" in components
    assert "spine00" in components
    assert "node0000/nic0/attach" in components


def test_build_topology_from_config():
    topo = build_topology(TopologyConfig(builder="fat_tree", su_count=2, nodes_per_su=4, rails=2))

    assert topo.kind == "fat_tree"
    assert len(topo.hosts) == 8


def test_describe_and_yaml(vela):
    described = describe_topology(vela)
    loaded = yaml.safe_load(topology_to_yaml(vela))

    assert described["kind"] == "vela"
    assert len(described["nodes"]) == 12
    assert loaded["bisection_gbps"] == 3200.0
    assert loaded["cross_rack_label"] == "1.6TBps"
