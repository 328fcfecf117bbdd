import math

import numpy as np
import pytest

from velasim.core.engine import RngStream
from velasim.core.exceptions import CacheFull, InvalidPhase, NonPositiveInput, PoolExhausted
from velasim.ext.resilience import (
    MONTH,
    BufferPool,
    CheckpointConfig,
    CheckpointPolicy,
    RestartTimeline,
    ScaleCache,
    StorageConfig,
    StorageKind,
    checkpoint,
    checkpoint_key,
    job_mtbf,
    lost_time_report,
    make_backend,
    restart_job,
    simulate_checkpointing,
    simulate_step_series,
    steady_state_index,
    young_interval,
)
from velasim.ext.workload import CheckpointRecord, JobPhase, JobSpec, JobState, plan_parallelism


def _cache(**kw):
    backend = make_backend(StorageConfig(backend=StorageKind.SCALE_CACHE, **kw))
    assert isinstance(backend, ScaleCache)
    return backend


def _crashed_job(topo, **kw):
    spec = JobSpec(params=1e9, tp=8, dp=4, checkpoint_state_size=1e12, **kw)
    job = JobState(id="j000", spec=spec)
    job.placement = plan_parallelism(spec, topo)
    job.enter(JobPhase.STEPPING, 0.0)
    job.set_step_time(10.0, 0.0)
    job.settle(1000.0)
    job.checkpoints.append(CheckpointRecord(time=1000.0, steps=100.0, cum_productive=1000.0))
    job.enter(JobPhase.CRASHED, 1600.0)
    return job


def test_young_interval():
    assert young_interval(300.0, 1.35e6) == pytest.approx(math.sqrt(2 * 300 * 1.35e6), rel=1e-12)
    assert young_interval(1.0, 2.0) == 2.0


@pytest.mark.parametrize(("delta", "mtbf"), [(0.0, 1.0), (1.0, 0.0), (-1.0, 5.0), (1.0, math.inf)])
def test_young_interval_rejects_bad_input(delta, mtbf):
    with pytest.raises(NonPositiveInput):
        young_interval(delta, mtbf)


def test_job_mtbf_scales_inversely_with_nodes():
    assert job_mtbf(96) == pytest.approx(MONTH / 0.02 / 96)
    assert job_mtbf(96) == pytest.approx(1.35e6)
    assert job_mtbf(48) == pytest.approx(2 * job_mtbf(96))
    with pytest.raises(NonPositiveInput):
        job_mtbf(0)


def test_young_policy_from_config():
    policy = CheckpointPolicy.from_config(CheckpointConfig(), delta=300.0, mtbf_job=1.35e6)

    assert policy.kind == "young"
    assert policy.interval == pytest.approx(young_interval(300.0, 1.35e6))


def test_interval_multiplier():
    config = CheckpointConfig(interval_multiplier=2.0)

    policy = CheckpointPolicy.from_config(config, delta=300.0, mtbf_job=1.35e6)

    assert policy.interval == pytest.approx(2 * young_interval(300.0, 1.35e6))


def test_fixed_policy_needs_an_interval():
    with pytest.raises(NonPositiveInput):
        CheckpointPolicy.from_config(CheckpointConfig(policy="fixed"), 300.0, 1e6)

    policy = CheckpointPolicy.from_config(
        CheckpointConfig(policy="fixed", interval="1h"), 300.0, 1e6
    )
    assert policy.interval == 3600.0
    assert policy.observe(900.0) is False


def test_young_policy_revises_on_drift():
    policy = CheckpointPolicy.from_config(CheckpointConfig(), delta=300.0, mtbf_job=1.35e6)
    original = policy.interval

    assert policy.observe(330.0) is False
    assert policy.interval == original
    assert policy.observe(600.0) is True
    assert policy.interval == pytest.approx(original * math.sqrt(2))
    assert policy.revisions == 1


def test_backend_bandwidths():
    nfs = make_backend(StorageConfig(backend=StorageKind.NFS_LIKE))
    sss = make_backend(StorageConfig(backend=StorageKind.SSS_LIKE))
    cache = _cache()

    assert nfs.write(5e9).duration == pytest.approx(1.0)
    assert nfs.read(1e9) == pytest.approx(1.0)
    assert sss.read(310e9) == pytest.approx(1.0)
    assert cache.write(15e9, key="a").duration == pytest.approx(1.0)


def test_backend_overrides():
    backend = make_backend(StorageConfig(backend=StorageKind.NFS_LIKE, write_bw=10.0))

    assert backend.write(10e9).duration == pytest.approx(1.0)


def test_storage_rejects_empty_transfers():
    with pytest.raises(NonPositiveInput):
        make_backend(StorageConfig()).write(0)


def test_cache_write_is_absorbed_then_flushed():
    cache = _cache()

    result = cache.write(4.5e12, now=100.0, key="ckpt")

    assert result.duration == pytest.approx(300.0)
    assert result.flush_at == pytest.approx(100.0 + 300.0 + 900.0)
    assert cache.dirty_keys() == ["ckpt"]
    cache.complete_flush("ckpt")
    assert cache.dirty_keys() == []


def test_cache_hits_and_misses():
    cache = _cache()

    miss = cache.read(2e9, key="shard")
    hit = cache.read(2e9, key="shard")

    assert miss == pytest.approx(1.0)
    assert hit == pytest.approx(2e9 / 40e9)
    assert cache.occupancy == 2e9


def test_cache_evicts_least_recently_used_and_pays_dirty_flush():
    cache = _cache(cache_capacity=10e12)
    cache.write(4e12, key="a")
    cache.write(4e12, key="b")

    result = cache.write(4e12, key="c")

    assert result.evicted == ("a",)
    # synchronous flush of "a" at object-store speed plus the write itself
    assert result.duration == pytest.approx(4e12 / 5e9 + 4e12 / 15e9)
    assert list(cache.entries) == ["b", "c"]
    assert cache.occupancy <= cache.capacity


def test_clean_eviction_is_free():
    cache = _cache(cache_capacity=10e12)
    cache.write(4e12, key="a")
    cache.complete_flush("a")
    cache.write(4e12, key="b")

    result = cache.write(4e12, key="c")

    assert result.evicted == ("a",)
    assert result.duration == pytest.approx(4e12 / 15e9)


def test_cache_rejects_oversize_objects():
    with pytest.raises(CacheFull):
        _cache(cache_capacity=1e12).write(2e12, key="big")


def test_scale_steps_are_tight_and_nfs_steps_are_not():
    scale = simulate_step_series(_cache(), 5.0, 1000, RngStream("scale", 0))
    nfs_backend = make_backend(StorageConfig(backend=StorageKind.NFS_LIKE))
    nfs = simulate_step_series(nfs_backend, 5.0, 1000, RngStream("nfs", 0))

    assert scale.min() >= 4.8
    assert scale.max() <= 5.2
    assert nfs[:10].mean() > 2 * nfs[-100:].mean()
    assert scale.mean() < 0.9 * nfs[-500:].mean()


def test_steady_state_index():
    flat = np.full(200, 5.0)
    warming = np.concatenate([np.linspace(15.0, 5.0, 100), np.full(300, 5.0)])

    assert steady_state_index(flat) == 0
    assert steady_state_index(flat[:10]) == 0
    assert 50 < steady_state_index(warming) <= 100


def test_nfs_takes_hundreds_of_steps_to_settle():
    nfs_backend = make_backend(StorageConfig(backend=StorageKind.NFS_LIKE))
    series = simulate_step_series(nfs_backend, 5.0, 1000, RngStream("nfs", 3))

    assert steady_state_index(series) > 300


def test_buffer_pool():
    pool = BufferPool.for_cluster(96, 0.10)
    assert pool.target == 10
    assert pool.deficit == 10

    pool.put("node0001")
    pool.put("node0000")
    pool.put("node0000")
    assert pool.available == ["node0000", "node0001"]

    assert pool.take() == "node0000"
    assert pool.taken == ["node0000"]
    pool.discard("node0001")
    assert pool.deficit == 10
    with pytest.raises(PoolExhausted):
        pool.take()


def test_restart_timeline():
    timeline = RestartTimeline(detect=300, reschedule=60, reload=67, recompute=600)

    assert timeline.total == 1027
    with pytest.raises(NonPositiveInput):
        RestartTimeline(detect=-1, reschedule=0, reload=0, recompute=0)


def test_checkpoint_requires_stepping(vela):
    job = JobState(id="j000", spec=JobSpec(params=1e9))

    with pytest.raises(InvalidPhase):
        checkpoint(job, _cache(), 0.0)

    job.enter(JobPhase.STEPPING, 0.0)
    result = checkpoint(job, _cache(), 10.0)
    assert job.phase is JobPhase.CHECKPOINTING
    assert result.duration == pytest.approx(1e12 / 15e9)
    assert checkpoint_key(job, 10.0) == "j000/ckpt@10.000"


def test_restart_uses_the_pool(vela):
    job = _crashed_job(vela)
    failed = job.nodes[1]
    pool = BufferPool(target=1)
    pool.put("node0011")

    timeline, mapping = restart_job(job, pool, _cache(), 300.0, [failed], 1600.0)

    assert mapping == {failed: "node0011"}
    assert "node0011" in job.nodes
    assert failed not in job.nodes
    assert job.phase is JobPhase.LOADING
    assert job.steps_done == 100.0
    assert timeline.recompute == pytest.approx(600.0)
    assert timeline.detect == 300.0
    assert job.restarts == [timeline]


def test_restart_falls_back_to_spares(vela):
    job = _crashed_job(vela)
    failed = job.nodes[0]

    _, mapping = restart_job(
        job, BufferPool(target=0), _cache(), 0.0, [failed], 1600.0, spares=["node0010"]
    )

    assert mapping == {failed: "node0010"}


def test_restart_without_replacements_leaves_pool_untouched(vela):
    job = _crashed_job(vela)
    pool = BufferPool(target=1)
    pool.put("node0011")

    with pytest.raises(PoolExhausted):
        restart_job(job, pool, _cache(), 0.0, list(job.nodes[:2]), 1600.0)

    assert pool.available == ["node0011"]
    assert pool.taken == []
    assert job.phase is JobPhase.CRASHED


def test_restart_requires_a_crashed_job(vela):
    job = _crashed_job(vela)
    job.phase = JobPhase.STEPPING

    with pytest.raises(InvalidPhase):
        restart_job(job, BufferPool(target=0), _cache(), 0.0, [], 0.0)


def test_restart_skips_tainted_checkpoints(vela):
    job = _crashed_job(vela)
    job.checkpoints.append(
        CheckpointRecord(time=1500.0, steps=150.0, cum_productive=1500.0, tainted_by=("f00003",))
    )

    timeline, _ = restart_job(
        job, BufferPool(target=0), _cache(), 0.0, [], 1600.0, tainted=["f00003"]
    )

    assert job.steps_done == 100.0
    assert timeline.recompute == pytest.approx(600.0)


def test_lost_time_report(vela):
    job = _crashed_job(vela)
    job.settle(1900.0)

    report = lost_time_report([job])

    assert sum(report.fractions.values()) == pytest.approx(1.0)
    assert report.seconds["productive"] == pytest.approx(1600.0)
    assert report.seconds["detect"] == pytest.approx(300.0)
    assert report.lost_fraction == pytest.approx(300.0 / 1900.0)


def test_lost_time_report_without_jobs():
    report = lost_time_report([])

    assert report.goodput == 1.0
    assert report.lost_fraction == 0.0


def test_checkpointing_without_failures_loses_only_checkpoint_time():
    lost = simulate_checkpointing(3000.0, 300.0, 1e15, 1e6, RngStream("ckpt", 0))

    assert lost == pytest.approx(300.0 / 3300.0)


def test_young_interval_beats_far_off_intervals():
    delta, mtbf, horizon = 300.0, 1.35e6, 1e8
    young = young_interval(delta, mtbf)

    def lost(interval):
        return simulate_checkpointing(interval, delta, mtbf, horizon, RngStream("ckpt", 1))

    assert lost(young) < lost(young / 10)
    assert lost(young) < lost(young * 10)
    assert lost(young) < 0.05
