import pytest

from velasim.core.engine import RngStream
from velasim.core.exceptions import DoubleFailure, UnknownComponent
from velasim.ext.power import (
    PowerConfig,
    PowerDomain,
    PowerSurgeConfig,
    PowerSystem,
    PowerTrace,
    check_surge_safety,
    gpu_slowdown,
    on_psu_failure,
    rack_power,
    run_surge_sweep,
)


def _rack(**kw):
    return PowerDomain("rack00", [f"s{i}" for i in range(6)], **kw)


def test_busy_rack_splits_across_two_pdus():
    domain = _rack()

    assert domain.total() == 36.0
    assert rack_power(domain) == {0: 18.0, 1: 18.0}


def test_psu_failure_surges_then_brakes():
    sequence = on_psu_failure(_rack(), t=100.0)

    assert sequence.surge_kw == 36.0
    assert sequence.brake_at == 102.0
    assert sequence.steady_kw == pytest.approx(19.2)
    assert [e.kind for e in sequence.events] == ["surge", "brake"]
    assert check_surge_safety(sequence.trace).passed


def test_overload_interval_is_the_brake_latency():
    sequence = on_psu_failure(_rack(), t=0.0, pdu=1)

    [interval] = sequence.trace.overload_intervals()

    assert interval.pdu == 0
    assert interval.duration == pytest.approx(2.0)
    assert interval.peak == 36.0


def test_lightly_loaded_rack_needs_no_brake():
    domain = _rack()
    for server in domain.servers[:4]:
        domain.loads[server] = "idle"

    sequence = on_psu_failure(domain, t=0.0)

    assert sequence.surge_kw == pytest.approx(2 * 6.0 + 4 * 1.5)
    assert sequence.brake_at is None
    assert sequence.trace.overload_intervals() == []


def test_slow_brake_fails_the_surge_check():
    sequence = on_psu_failure(_rack(brake_latency=6.0), t=0.0)

    verdict = check_surge_safety(sequence.trace)

    assert not verdict.passed
    assert verdict.label == "FAIL"
    assert verdict.violations[0].duration == pytest.approx(6.0)


def test_second_pdu_loss_is_a_double_failure():
    domain = _rack()
    on_psu_failure(domain, t=0.0)

    with pytest.raises(DoubleFailure):
        on_psu_failure(domain, t=10.0, pdu=1)
    assert domain.total() == 0.0


def test_failing_an_already_failed_pdu():
    domain = _rack()
    on_psu_failure(domain, t=0.0)

    with pytest.raises(UnknownComponent):
        on_psu_failure(domain, t=5.0, pdu=0)


def test_trace_with_open_overload():
    trace = PowerTrace("rack00", rating=20.0, tolerance=5.0)
    trace.record(0.0, {0: 10.0})
    trace.record(1.0, {0: 30.0})

    [interval] = trace.overload_intervals()

    assert interval.end == float("inf")
    assert not check_surge_safety(trace).passed


@pytest.mark.parametrize(
    ("watts", "slowdown"), [(400.0, 1.0), (150.0, 3.0), (275.0, 2.0), (100.0, 3.0), (500.0, 1.0)]
)
def test_gpu_slowdown(node, watts, slowdown):
    assert gpu_slowdown(watts, node, 3.0) == pytest.approx(slowdown)


def test_power_config_ordering():
    with pytest.raises(ValueError):
        PowerConfig(server_braked_power=7.0)
    with pytest.raises(ValueError):
        PowerConfig(brake_latency=6.0)


def test_surge_sweep_passes_with_defaults():
    result = run_surge_sweep(PowerSurgeConfig(samples=500), PowerConfig(), RngStream("surge", 0))

    assert result.passed
    assert result.samples == 500
    assert result.longest_overload == pytest.approx(2.0)
    assert result.post_brake_kw == pytest.approx(19.2)
    assert result.post_brake_kw <= PowerConfig().pdu_rating


def test_power_system_brakes_a_rack(vela):
    system = PowerSystem(vela, PowerConfig())
    seen = []
    system.listeners.append(lambda kind, nodes: seen.append((kind, len(nodes))))
    for host in vela.racks["rack00"]:
        system.set_load(host, "busy", 0.0)

    sequence = system.pdu_failure("rack00", 0, 10.0)
    assert sequence is not None
    assert not system.is_braked("node0000")

    system.brake_rack("rack00", sequence.brake_at)
    assert system.is_braked("node0000")
    assert system.slowdown("node0000") == pytest.approx(3.0)
    assert system.slowdown("node0006") == 1.0
    assert seen == [("slowdown", 6)]

    system.pdu_repair("rack00", 0, 100.0)
    assert not system.is_braked("node0000")
    assert system.verdicts[0].passed


def test_power_system_single_node_brake(vela):
    system = PowerSystem(vela, PowerConfig())

    system.brake_node("node0003", 5.0)
    assert system.slowdown("node0003") == pytest.approx(3.0)
    assert system.slowdown("node0002") == 1.0

    system.release_node("node0003", 50.0)
    assert system.slowdown("node0003") == 1.0


def test_power_system_rack_goes_dark_and_returns(vela):
    system = PowerSystem(vela, PowerConfig())
    seen = []
    system.listeners.append(lambda kind, nodes: seen.append(kind))

    system.pdu_failure("rack01", 0, 1.0)
    assert system.pdu_failure("rack01", 1, 2.0) is None
    assert "down" in seen

    system.pdu_repair("rack01", 1, 3.0)
    assert "up" in seen
    assert system.is_braked("node0006")


def test_power_system_energy_balance(vela):
    system = PowerSystem(vela, PowerConfig())
    system.set_load("node0000", "busy", 0.0)
    system.pdu_failure("rack00", 0, 100.0)
    system.advance(200.0)

    assert system.energy_balance() == pytest.approx(0.0, abs=1e-9)
    # 6 kW x 200 s busy plus 11 idle servers at 1.5 kW
    assert sum(system.server_energy.values()) == pytest.approx(200 * (6.0 + 11 * 1.5))


def test_power_system_unknown_rack(vela):
    system = PowerSystem(vela, PowerConfig())

    with pytest.raises(UnknownComponent):
        system.pdu_failure("rack99", 0, 1.0)
