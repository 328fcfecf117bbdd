import pytest
from conftest import small_training

from velasim.core.application import build_simulation
from velasim.core.exceptions import InvalidSpec
from velasim.ext.faults import (
    FAILURE_TAXONOMY,
    ClusterHealth,
    FailureEvent,
    FailureKind,
    apply_failure,
)
from velasim.ext.monitoring import Monitor
from velasim.ext.scheduler import ClusterQueue, NodeState, Scheduler
from velasim.ext.workload import JobPhase, JobSpec, JobState

JOB = {"params": 1e9, "tp": 8, "pp": 1, "dp": 8, "target_tflops": 140}


def _quiet(**overrides):
    return small_training(faults={"enabled": False}, **overrides)


def _fault(kind, target, onset, fid="inj900"):
    return FailureEvent(
        id=fid, kind=kind, target=target, onset=onset, magnitude=FAILURE_TAXONOMY[kind].magnitude
    )


def test_queue_orders_by_priority_then_arrival():
    queue = ClusterQueue()
    for name, priority in (("a", 0), ("b", 5), ("c", 0), ("d", 5)):
        queue.enqueue(JobState(id=name, spec=JobSpec(name=name, params=1e9, priority=priority)))

    assert [j.id for j in queue.pending] == ["b", "d", "a", "c"]
    assert queue.conserved


def test_job_starts_and_pool_fills(settings):
    with build_simulation(_quiet(), settings=settings) as sim:
        sim.run(until=600.0)
        scheduler = sim.get(Scheduler)
        job = scheduler.jobs["j000"]

        assert job.phase is JobPhase.STEPPING
        assert len(job.nodes) == 8
        assert all(scheduler.nodes[n].job == "j000" for n in job.nodes)
        # 10% of 12 nodes
        assert len(scheduler.pool.available) == 1
        assert scheduler.nodes[scheduler.pool.available[0]].state is NodeState.RESERVED_BUFFER
        assert sim.check_invariants().ok


def test_job_that_does_not_fit_waits(settings):
    with build_simulation(_quiet(), settings=settings) as sim:
        sim.run(until=60.0)
        scheduler = sim.get(Scheduler)

        job_id = scheduler.submit(JobSpec(**JOB), sim.now)

        assert job_id == "j001"
        assert [j.id for j in scheduler.queue.pending] == ["j001"]
        assert scheduler.queue.conserved


def test_oversized_job_is_rejected(settings):
    with build_simulation(_quiet(), settings=settings) as sim:
        scheduler = sim.get(Scheduler)

        with pytest.raises(InvalidSpec):
            scheduler.submit(JobSpec(params=1e9, tp=8, dp=13), 0.0)


def test_completed_job_frees_nodes_for_the_next(settings):
    short = {**JOB, "target_tokens": 4_194_304 * 10}
    with build_simulation(_quiet(jobs=[short, JOB]), settings=settings) as sim:
        sim.run(until=3600.0)
        scheduler = sim.get(Scheduler)
        first, second = scheduler.jobs["j000"], scheduler.jobs["j001"]
        summary = sim.summaries()["scheduler"]

        assert first.phase is JobPhase.COMPLETED
        assert first.steps_done == pytest.approx(10.0)
        assert second.phase is JobPhase.STEPPING
        assert second.started_at == first.completed_at
        assert summary["completed"] == 1
        assert summary["running"] == 1
        assert summary["submitted"] == 2


def test_node_crash_restarts_job_on_a_buffer_node(settings):
    with build_simulation(_quiet(), settings=settings) as sim:
        sim.run(until=100.0)
        scheduler = sim.get(Scheduler)
        job = scheduler.jobs["j000"]
        spare = scheduler.pool.available[0]
        victim = job.nodes[0]

        sim.engine.schedule(200.0, "fault_onset", victim, _fault(FailureKind.DIMM, victim, 200.0))
        sim.run(until=2400.0)

        assert len(job.restarts) == 1
        assert job.restarts[0].detect == pytest.approx(300.0)
        assert spare in job.nodes
        assert victim not in job.nodes
        assert scheduler.nodes[victim].state is NodeState.DOWN
        assert job.phase is JobPhase.STEPPING
        assert sim.check_invariants().ok


def test_detected_subtle_fault_drains_the_node(settings):
    with build_simulation(_quiet(), settings=settings) as sim:
        sim.run(until=100.0)
        scheduler = sim.get(Scheduler)
        job = scheduler.jobs["j000"]
        node = job.nodes[2]
        event = _fault(FailureKind.PCIE_DOWNGRADE, node, 100.0)
        apply_failure(event, sim.get(ClusterHealth))
        event.mark_detected(100.0)

        scheduler.on_fault_detected(event, 100.0)

        assert job.drain == {node: event.id}
        assert scheduler.nodes[node].reason.startswith("drain:")
        assert job.phase is JobPhase.STEPPING


def test_silent_corruption_crashes_immediately(settings):
    with build_simulation(_quiet(), settings=settings) as sim:
        sim.run(until=100.0)
        scheduler = sim.get(Scheduler)
        job = scheduler.jobs["j000"]
        node = job.nodes[1]
        event = _fault(FailureKind.HBM_CORRUPT, node, 100.0)
        apply_failure(event, sim.get(ClusterHealth))
        event.mark_detected(100.0)

        scheduler.on_fault_detected(event, 100.0)

        assert job.phase is JobPhase.CRASHED
        assert scheduler.nodes[node].state is NodeState.CLOSED


def test_scheduler_summary_counts_node_states(settings):
    with build_simulation(_quiet(), settings=settings) as sim:
        sim.run(until=600.0)
        summary = sim.summaries()["scheduler"]

        assert sum(summary["node_states"].values()) == 12
        assert summary["node_states"]["reserved_buffer"] == 1
        assert summary["buffer_pool"] == 1
        assert summary["tokens_per_day"] > 0
        assert summary["tflops_per_gpu"] > 0


def test_job_is_not_placed_on_nodes_under_an_intrusive_check(settings):
    late = {**JOB, "submit_at": 3660.0}
    with build_simulation(_quiet(jobs=[late]), settings=settings) as sim:
        sim.run(until=3700.0)
        scheduler = sim.get(Scheduler)
        runs = sim.get(Monitor).intrusive_runs

        assert len(runs) == 12
        assert [j.id for j in scheduler.queue.pending] == ["j000"]
        assert all(s.state is NodeState.CLOSED for s in scheduler.nodes.values())
        assert all(s.reason == "health_check" for s in scheduler.nodes.values())
        assert sim.check_invariants().ok

        sim.run(until=6000.0)
        job = scheduler.jobs["j000"]
        checked = {node: end for node, _, end, _ in runs}

        assert job.phase is JobPhase.STEPPING
        assert all(job.started_at >= checked[n] for n in job.nodes)
        assert not any(scheduler.under_check(n) for n in scheduler.nodes)
        assert sim.check_invariants().ok


def test_drained_node_keeps_its_fault_until_it_leaves_the_job(settings):
    scenario = _quiet(
        checkpoint={"policy": "fixed", "interval": 21600.0},
        monitoring={"posture": "reactive"},
    )
    with build_simulation(scenario, settings=settings) as sim:
        ready = []
        sim.subscribe("repair_ready", lambda event: ready.append((sim.now, event.id)))
        sim.run(until=100.0)
        scheduler = sim.get(Scheduler)
        job = scheduler.jobs["j000"]
        node = job.nodes[2]
        event = _fault(FailureKind.PCIE_DOWNGRADE, node, 100.0)
        apply_failure(event, sim.get(ClusterHealth))
        event.mark_detected(100.0)

        sim.publish("fault_detected", event=event)
        sim.run(until=21000.0)

        assert job.drain == {node: event.id}
        assert event.active
        assert event.repaired_at is None
        assert ready == []

        sim.run(until=25200.0)

        assert node not in job.nodes
        assert job.restarts
        assert [fid for _, fid in ready] == [event.id]
        assert ready[0][0] >= 21600.0
        assert event.repaired_at is None or event.repaired_at >= ready[0][0]
        assert sim.check_invariants().ok
