import math

import pytest

from velasim.core.exceptions import InsufficientNodes, InvalidPhase, InvalidSpec, JobCrashed
from velasim.ext.power import gpu_slowdown
from velasim.ext.topology import DeltaChange, TopologyDelta, apply_delta
from velasim.ext.workload import (
    DAY,
    CheckpointRecord,
    ClusterView,
    JobPhase,
    JobSpec,
    JobState,
    Sharding,
    closed_form_tokens_per_day,
    gpu_hours,
    node_step_times,
    parse_duration,
    plan_parallelism,
    step_time,
    tflops_per_gpu,
    throughput_report,
)


def _compute_bound(**kw):
    values = {
        "params": 1e9,
        "tp": 8,
        "dp": 12,
        "base_step_compute": 5.0,
        "host_io_bytes_per_step": 0.0,
    }
    values.update(kw)
    return JobSpec(**values)


def _stepping(spec, topo):
    job = JobState(id="j000", spec=spec, phase=JobPhase.STEPPING)
    job.placement = plan_parallelism(spec, topo)
    return job


@pytest.mark.parametrize(
    ("text", "seconds"), [("300s", 300.0), ("5m", 300.0), ("12h", 43_200.0), ("30d", 30 * DAY)]
)
def test_parse_duration(text, seconds):
    assert parse_duration(text) == seconds
    assert parse_duration(42) == 42


def test_job_spec_arithmetic(node):
    spec = JobSpec(params=20e9, tp=4, pp=4, dp=48, target_tokens=4_194_304 * 10.5)

    assert spec.gpu_count == 768
    assert spec.nodes_needed(node) == 96
    assert spec.dp_message_bytes() == pytest.approx(20e9 / 16 * 2)
    assert spec.target_steps == 11


def test_fsdp_moves_half_again_as_much_data():
    plain = JobSpec(params=8e9, dp=8)
    sharded = JobSpec(params=8e9, dp=8, sharding=Sharding.FSDP)

    assert sharded.dp_message_bytes() == pytest.approx(1.5 * plain.dp_message_bytes())


def test_step_compute_from_target_tflops():
    spec = JobSpec(params=1e9, tp=8, dp=8, target_tflops=140)

    expected = 6 * 1e9 * 4_194_304 / (64 * 140e12)
    assert spec.step_compute() == pytest.approx(expected)


@pytest.mark.parametrize(
    "kw",
    [
        {"tp": 2, "dp": 2, "gpus": 8},
        {"tp": 3, "dp": 1},
        {"tp": 16, "dp": 1},
    ],
)
def test_job_spec_check(node, kw):
    with pytest.raises(InvalidSpec):
        JobSpec(params=1e9, **kw).check(node)


def test_placement_rank_layout(vela):
    spec = JobSpec(params=1e9, tp=4, pp=2, dp=2)
    placement = plan_parallelism(spec, vela)

    assert len(placement.nodes) == 2
    assert placement.dp_rings() == [
        [0, 4], [1, 5], [2, 6], [3, 7], [8, 12], [9, 13], [10, 14], [11, 15]
    ]
    assert (0, 8) in placement.pp_pairs()
    assert placement.node_of(8) == placement.nodes[1]
    assert placement.local_of(9) == 1


def test_placement_prefers_fullest_rack(vela):
    available = [h for h in vela.hosts if h not in ("node0000", "node0001")]

    placement = plan_parallelism(_compute_bound(dp=4), vela, available)

    assert all(vela.rack_of(n) == "rack01" for n in placement.nodes)


def test_placement_needs_enough_nodes(vela):
    with pytest.raises(InsufficientNodes):
        plan_parallelism(_compute_bound(dp=13), vela)


def test_placement_replace_keeps_slots(vela):
    placement = plan_parallelism(_compute_bound(dp=2), vela)

    swapped = placement.replace({"node0000": "node0011"})

    assert swapped.nodes == ("node0011", "node0001")


def test_step_time_is_compute_plus_exposed_comm(network):
    job = _stepping(_compute_bound(), network.topo)

    duration = step_time(job, ClusterView(network))

    assert duration > 5.0 * 1.05
    assert duration < 5.0 * 1.05 * 1.05


def test_overlap_hides_communication(network):
    exposed = step_time(_stepping(_compute_bound(), network.topo), ClusterView(network))
    hidden = step_time(_stepping(_compute_bound(overlap=1.0), network.topo), ClusterView(network))

    assert hidden == pytest.approx(5.0 * 1.05)
    assert exposed > hidden


def test_braked_node_slows_the_whole_job_about_threefold(network):
    job = _stepping(_compute_bound(), network.topo)
    slow = job.placement.nodes[3]
    factor = gpu_slowdown(150.0, network.topo.node_spec, 3.0)

    baseline = step_time(job, ClusterView(network))
    view = ClusterView(network, slowdown=lambda n: factor if n == slow else 1.0)
    braked = step_time(job, view)
    per_node = node_step_times(job, view)

    assert braked / baseline == pytest.approx(3.0, rel=0.1)
    assert max(per_node, key=per_node.get) == slow


def test_analytic_and_simulated_step_times_agree(network):
    job = _stepping(_compute_bound(), network.topo)

    analytic = step_time(job, ClusterView(network, mode="analytic"))
    simulated = step_time(job, ClusterView(network, mode="simulated"))

    assert simulated == pytest.approx(analytic, rel=0.02)


def test_degraded_host_link_slows_host_io(network):
    job = _stepping(_compute_bound(host_io_bytes_per_step=2e9), network.topo)
    before = step_time(job, ClusterView(network))
    apply_delta(network.topo, TopologyDelta(f"{job.nodes[0]}/pcie", DeltaChange.BW_SCALE, 0.125))

    after = step_time(job, ClusterView(network))

    # 2 GB over 24 GB/s, then over 3 GB/s
    assert after - before == pytest.approx(2e9 / 3e9 - 2e9 / 24e9, rel=1e-6)


def test_down_node_crashes_the_job(network):
    job = _stepping(_compute_bound(), network.topo)
    down = job.nodes[0]

    with pytest.raises(JobCrashed):
        node_step_times(job, ClusterView(network, is_down=lambda n: n == down))


def test_step_time_requires_stepping(network):
    job = _stepping(_compute_bound(), network.topo)
    job.phase = JobPhase.LOADING
    with pytest.raises(InvalidPhase):
        step_time(job, ClusterView(network))

    unplaced = JobState(id="j001", spec=_compute_bound(), phase=JobPhase.STEPPING)
    with pytest.raises(InvalidPhase):
        node_step_times(unplaced, ClusterView(network))


def test_ledger_and_fluid_progress():
    job = JobState(id="j000", spec=JobSpec(params=1e9, target_tokens=4_194_304 * 100))
    job.enter(JobPhase.LOADING, 0.0)
    job.enter(JobPhase.STEPPING, 60.0)
    job.set_step_time(10.0, 60.0)
    job.enter(JobPhase.CHECKPOINTING, 560.0)

    assert job.steps_done == pytest.approx(50.0)
    assert job.tokens_done == pytest.approx(50 * 4_194_304)
    assert job.ledger["pend"] == 60.0
    assert job.ledger["productive"] == 500.0
    assert job.wall_time == 560.0


def test_progress_stops_at_target():
    job = JobState(id="j000", spec=JobSpec(params=1e9, target_tokens=4_194_304 * 10))
    job.enter(JobPhase.STEPPING, 0.0)
    job.set_step_time(1.0, 0.0)

    job.settle(100.0)

    assert job.steps_done == 10.0
    assert job.remaining_steps == 0.0


def test_rollback_moves_productive_time_to_recompute():
    job = JobState(id="j000", spec=JobSpec(params=1e9))
    job.enter(JobPhase.STEPPING, 0.0)
    job.set_step_time(10.0, 0.0)
    job.settle(1000.0)
    job.checkpoints.append(CheckpointRecord(time=1000.0, steps=100.0, cum_productive=1000.0))
    job.settle(1500.0)

    lost = job.rollback(job.last_checkpoint())

    assert lost == pytest.approx(500.0)
    assert job.steps_done == 100.0
    assert job.steps_processed == pytest.approx(150.0)
    assert job.ledger["recompute"] == pytest.approx(500.0)
    assert job.ledger["productive"] == pytest.approx(1000.0)


def test_last_checkpoint_skips_tainted_records():
    job = JobState(id="j000", spec=JobSpec(params=1e9), submitted_at=5.0)
    job.checkpoints.append(CheckpointRecord(10.0, 1.0, 10.0))
    job.checkpoints.append(CheckpointRecord(20.0, 2.0, 20.0, tainted_by=("f00001",)))

    assert job.last_checkpoint().time == 20.0
    assert job.last_checkpoint(exclude_tainted=["f00001"]).time == 10.0
    assert job.last_checkpoint(exclude_tainted=["f00001", "x"]).steps == 1.0

    job.checkpoints.clear()
    start = job.last_checkpoint()
    assert (start.time, start.steps) == (5.0, 0.0)


def test_tflops_accounting():
    # 20B params at 94.8B tokens/day on 512 GPUs
    value = tflops_per_gpu(20e9, 94.8e9, 512)

    assert value == pytest.approx(6 * 20e9 * 94.8e9 / DAY / 512 / 1e12, rel=1e-12)
    assert 255 < value < 259


def test_gpu_hours_for_a_month_on_1024_gpus():
    hours = gpu_hours(1024, 31 * DAY)

    assert hours == 761_856
    assert math.isclose(hours, 768_856, rel_tol=0.01)


def test_throughput_report():
    spec = JobSpec(params=20e9, tp=4, pp=4, dp=32)
    job = JobState(id="j000", spec=spec)
    job.enter(JobPhase.STEPPING, 0.0)
    job.set_step_time(10.0, 0.0)
    job.settle(DAY)

    report = throughput_report(job, 0.0, DAY)

    assert report.tokens_per_day == pytest.approx(closed_form_tokens_per_day(spec, 10.0))
    assert report.goodput == pytest.approx(1.0)
    assert report.gpu_hours == pytest.approx(512 * 24)
    assert report.tflops_per_gpu == pytest.approx(
        tflops_per_gpu(20e9, report.tokens_per_day, 512)
    )


def test_throughput_report_needs_a_step():
    job = JobState(id="j000", spec=JobSpec(params=1e9))

    with pytest.raises(InvalidPhase):
        throughput_report(job, 0.0, 100.0)
