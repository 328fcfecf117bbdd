"""
End-to-end acceptance checks. These run full presets and seed sweeps and
take minutes; they are deselected by default (``pytest -m slow``).
"""

import filecmp
import math

import numpy as np
import pytest
from conftest import small_training

from velasim.core.engine import RngStream
from velasim.core.exceptions import JobCrashed
from velasim.core.settings import Settings
from velasim.ext.faults import FAILURE_TAXONOMY, FailureClass, FailureEvent
from velasim.ext.monitoring import MonitoringConfig, Posture, detection_latency
from velasim.ext.network import Network, NetworkConfig
from velasim.ext.power import gpu_slowdown, run_surge_sweep
from velasim.ext.resilience import (
    MONTH,
    job_mtbf,
    simulate_checkpointing,
    young_interval,
)
from velasim.ext.topology import DeltaChange, TopologyDelta, apply_delta, build_vela_topology
from velasim.ext.workload import (
    DAY,
    ClusterView,
    JobPhase,
    JobSpec,
    JobState,
    closed_form_tokens_per_day,
    gpu_hours,
    plan_parallelism,
    step_time,
    tflops_per_gpu,
    throughput_report,
)
from velasim.runner import run_scenario
from velasim.scenario import parse_scenario

pytestmark = pytest.mark.slow

QUIET = Settings(event_log=False)


def _stepping(spec, topo):
    job = JobState(id="j000", spec=spec, phase=JobPhase.STEPPING)
    job.placement = plan_parallelism(spec, topo)
    return job


def _compute_bound(dp):
    return JobSpec(params=1e9, tp=8, dp=dp, base_step_compute=5.0, host_io_bytes_per_step=0.0)


def test_young_interval_matches_closed_form_over_a_fuzz_grid():
    rng = np.random.default_rng(0)
    deltas = 10 ** rng.uniform(-3, 6, 10_000)
    mtbfs = 10 ** rng.uniform(-3, 9, 10_000)

    for delta, mtbf in zip(deltas, mtbfs, strict=True):
        value = young_interval(float(delta), float(mtbf))
        assert value == pytest.approx(math.sqrt(2 * delta * mtbf), rel=1e-12)
        assert value**2 == pytest.approx(2 * delta * mtbf, rel=1e-12)


def test_young_interval_is_near_the_brute_force_optimum():
    delta = 300.0
    mtbf = job_mtbf(96, 0.02)
    young = young_interval(delta, mtbf)
    horizon = 36 * MONTH
    seeds = range(20)

    def mean_lost(interval):
        return np.mean(
            [
                simulate_checkpointing(interval, delta, mtbf, horizon, RngStream("ckpt", s))
                for s in seeds
            ]
        )

    swept = [mean_lost(float(i)) for i in np.geomspace(young / 8, young * 8, 30)]
    at_young = mean_lost(young)

    assert at_young <= 1.10 * min(swept)


def test_month_on_vela_loses_under_a_tenth_of_the_time():
    config = parse_scenario("vela-resilience-month")

    lost = [
        run_scenario(config, seed, settings=QUIET).summary["resilience"]["lost_fraction"]
        for seed in range(50)
    ]

    assert sum(f < 0.10 for f in lost) >= 45


def test_busbw_by_protocol():
    report = run_scenario(parse_scenario("fig3-sweep"), 0, settings=QUIET)
    busbw = {(r["protocol"], r["size"]): r["busbw"] for r in report.tables["busbw"]}
    large = [s for _, s in busbw if s >= 500_000_000]

    assert 7 <= busbw["gdr", 8_000_000] / busbw["tcp", 8_000_000] <= 13
    for size in large:
        assert 3 <= busbw["gdr", size] / busbw["tcp", size] <= 5
    assert busbw["tcp", max(large)] == pytest.approx(6.0, rel=0.2)
    assert 20 <= busbw["gdr", max(large)] <= 30


def test_busbw_is_flat_across_gpu_counts():
    report = run_scenario(parse_scenario("fig4-sweep"), 0, settings=QUIET)

    assert {r["count"] for r in report.tables["busbw"]} == {32, 64, 128, 256, 512, 1024}
    assert report.summary["busbw"]["variation_at_largest"] < 0.20


def test_one_braked_node_slows_a_96_node_job_threefold():
    topo = build_vela_topology(16)
    network = Network(topo, NetworkConfig(), salt=0)
    job = _stepping(_compute_bound(96), topo)
    slow = job.nodes[40]
    factor = gpu_slowdown(150.0, topo.node_spec, 3.0)

    baseline = step_time(job, ClusterView(network))
    braked = step_time(job, ClusterView(network, slowdown=lambda n: factor if n == slow else 1.0))

    assert len(job.nodes) == 96
    assert braked / baseline == pytest.approx(3.0, rel=0.1)


def test_pdu_surges_stay_within_tolerance():
    config = parse_scenario("power-surge")

    result = run_surge_sweep(config.power_surge, config.power, RngStream("surge", 0))

    assert result.samples == 10_000
    assert result.passed
    assert result.longest_overload <= config.power.surge_tolerance
    assert result.post_brake_kw == pytest.approx(19.2)
    assert result.post_brake_kw <= config.power.pdu_rating


@pytest.mark.parametrize("seed", range(5))
def test_storage_backends_step_variance(seed):
    report = run_scenario(parse_scenario("storage-compare"), seed, settings=QUIET)
    stats = report.summary["storage_steps"]

    assert stats["scale_cache"]["spread"] < 0.10
    assert 0.3 < stats["nfs_like"]["spread"] < 0.7
    assert stats["nfs_like"]["steady_state_step"] > 300
    assert stats["speedup"] >= 0.10


@pytest.mark.parametrize("seed", range(5))
def test_incast_needs_the_control_loop(seed):
    report = run_scenario(parse_scenario("incast-8to1"), seed, settings=QUIET)
    controlled = report.summary["incast"]["controlled"]
    uncontrolled = report.summary["incast"]["uncontrolled"]

    assert controlled["drops"] == 0
    assert controlled["marks"] > 0
    assert uncontrolled["drops"] > 0


@pytest.mark.parametrize("component", ["rack00-tor0", "spine00", "node0000/nic0/p0"])
def test_single_fabric_failure_never_crashes_a_job(network, component):
    job = _stepping(_compute_bound(12), network.topo)
    baseline = step_time(job, ClusterView(network))

    apply_delta(network.topo, TopologyDelta(component, DeltaChange.LINK_DOWN))
    try:
        degraded = step_time(job, ClusterView(network))
    except JobCrashed:
        pytest.fail(f"{component} failure crashed the job")
    apply_delta(network.topo, TopologyDelta(component, DeltaChange.LINK_UP))
    recovered = step_time(job, ClusterView(network))

    assert degraded >= baseline
    assert recovered == pytest.approx(baseline)


def test_throughput_accounting():
    spec = JobSpec(params=20e9, tp=4, pp=4, dp=32)
    job = JobState(id="j000", spec=spec)
    job.enter(JobPhase.STEPPING, 0.0)
    job.set_step_time(spec.global_batch_tokens * DAY / 94.8e9, 0.0)
    job.settle(DAY)

    report = throughput_report(job, 0.0, DAY)

    assert spec.gpu_count == 512
    assert closed_form_tokens_per_day(spec, job.step_time) == pytest.approx(94.8e9, rel=1e-9)
    assert report.tokens_per_day == pytest.approx(94.8e9, rel=1e-6)
    expected = 6 * 20e9 * report.tokens_per_day / DAY / 512 / 1e12
    assert report.tflops_per_gpu == pytest.approx(expected, rel=1e-6)
    assert report.tflops_per_gpu == pytest.approx(tflops_per_gpu(20e9, 94.8e9, 512), rel=1e-6)
    # Granite-8B: 1024 GPUs for 31 days
    assert gpu_hours(1024, 31 * DAY) == pytest.approx(768_856, rel=0.01)


@pytest.mark.parametrize(
    "config",
    [
        small_training(horizon="7d"),
        parse_scenario("incast-8to1"),
        parse_scenario("storage-compare"),
    ],
    ids=["training", "incast", "storage"],
)
def test_same_seed_writes_identical_artifacts(config, settings, tmp_path):
    a = run_scenario(config, 21, output_dir=tmp_path / "a", settings=settings)
    b = run_scenario(config, 21, output_dir=tmp_path / "b", settings=settings)

    assert a.artifacts == b.artifacts
    _, mismatch, errors = filecmp.cmpfiles(
        a.output_dir, b.output_dir, a.artifacts, shallow=False
    )
    assert mismatch == []
    assert errors == []


def test_proactive_detection_is_twice_as_fast():
    config = MonitoringConfig()
    kinds = [
        kind
        for kind, failure in FAILURE_TAXONOMY.items()
        if failure.failure_class in (FailureClass.SUBTLE, FailureClass.SOFTWARE)
    ]
    latencies: dict[Posture, list[float]] = {Posture.REACTIVE: [], Posture.PROACTIVE: []}

    for seed in range(50):
        for kind in kinds:
            for posture, values in latencies.items():
                event = FailureEvent(id=f"f{seed}-{kind}", kind=kind, target="node0000", onset=0.0)
                values.append(detection_latency(event, posture, config, RngStream("d", seed)))

    reactive = np.mean(latencies[Posture.REACTIVE])
    proactive = np.mean(latencies[Posture.PROACTIVE])
    assert reactive >= 2 * proactive
