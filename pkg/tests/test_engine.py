import math

import numpy as np
import pytest

from velasim.core.engine import (
    Constant,
    DistributionConfig,
    Engine,
    EventRecord,
    Exponential,
    LogNormal,
    Normal,
    RngStream,
    TruncLogNormal,
    Uniform,
)
from velasim.core.exceptions import InvalidDistribution, SchedulingInPast


def test_events_dispatch_in_time_order(engine):
    seen = []
    engine.on("tick", lambda e: seen.append((e.time, e.target)))
    engine.schedule(5.0, "tick", "c")
    engine.schedule(1.0, "tick", "a")
    engine.schedule(3.0, "tick", "b")

    stats = engine.run_until(10.0)

    assert seen == [(1.0, "a"), (3.0, "b"), (5.0, "c")]
    assert stats.events_dispatched == 3
    assert stats.clock == 10.0
    assert engine.now == 10.0


def test_simultaneous_events_keep_insertion_order(engine):
    seen = []
    engine.on("tick", lambda e: seen.append(e.target))
    for name in "xyz":
        engine.schedule(2.0, "tick", name)

    engine.run_until(2.0)

    assert seen == ["x", "y", "z"]


def test_event_records_order_by_time_then_sequence():
    early = EventRecord(1.0, 9, "a")
    tie_first = EventRecord(2.0, 1, "b")
    tie_second = EventRecord(2.0, 2, "c")

    assert sorted([tie_second, early, tie_first]) == [early, tie_first, tie_second]


def test_handlers_can_schedule_follow_ups(engine):
    seen = []

    def handler(event):
        seen.append(engine.now)
        if len(seen) < 3:
            engine.schedule_in(1.5, "tick")

    engine.on("tick", handler)
    engine.schedule(0.0, "tick")
    engine.run_until(100.0)

    assert seen == [0.0, 1.5, 3.0]


def test_run_until_stops_at_horizon(engine):
    engine.on("tick", lambda e: None)
    engine.schedule(1.0, "tick")
    engine.schedule(20.0, "tick")

    assert engine.run_until(10.0).events_dispatched == 1
    assert engine.pending() == 1
    assert engine.run_until(30.0).events_dispatched == 1


def test_cancelled_events_are_skipped(engine):
    seen = []
    engine.on("tick", lambda e: seen.append(e.target))
    keep = engine.schedule(1.0, "tick", "keep")
    drop = engine.schedule(2.0, "tick", "drop")
    engine.cancel(drop)

    engine.run_until(5.0)

    assert keep > 0
    assert seen == ["keep"]


def test_scheduling_in_the_past_raises(engine):
    engine.run_until(10.0)

    with pytest.raises(SchedulingInPast):
        engine.schedule(5.0, "tick")
    with pytest.raises(SchedulingInPast):
        engine.schedule(math.nan, "tick")
    with pytest.raises(SchedulingInPast):
        engine.run_until(1.0)


def test_scheduling_within_tolerance_is_clamped_to_now(engine):
    engine.run_until(10.0)
    engine.schedule(10.0 - 1e-12, "tick")
    engine.on("tick", lambda e: None)

    engine.run_until(10.0)

    assert engine.event_log[-1].startswith("10.000000000|")


def test_event_log_lines():
    engine = Engine()
    engine.schedule(1.25, "pdu_failure", "rack00")
    engine.run_until(2.0)

    assert engine.event_log == ["1.250000000|1|pdu_failure|rack00"]


def test_event_log_can_be_disabled():
    engine = Engine(keep_log=False)
    engine.schedule(1.0, "tick")
    engine.run_until(2.0)

    assert engine.event_log == []
    assert engine.dispatched == 1


def test_streams_are_reproducible():
    a = RngStream("faults", 11)
    b = RngStream("faults", 11)

    assert [a.random() for _ in range(5)] == [b.random() for _ in range(5)]
    assert a.draw_count == 5


def test_streams_with_different_names_are_independent():
    a = RngStream("faults", 11).sample(Uniform(0, 1), 8)
    b = RngStream("power", 11).sample(Uniform(0, 1), 8)

    assert not np.allclose(a, b)


def test_stream_draws_do_not_depend_on_other_streams():
    left = RngStream("left", 3)
    expected = [left.random() for _ in range(3)]

    noisy = RngStream("right", 3)
    for _ in range(100):
        noisy.random()
    again = RngStream("left", 3)

    assert [again.random() for _ in range(3)] == expected


def test_child_streams():
    parent = RngStream("faults", 5)
    child = parent.child("gpu_fail")

    assert child.name == "faults/gpu_fail"
    assert child.seed == parent.seed
    assert child.random() != RngStream("faults", 5).random()


def test_exponential_mean(stream):
    samples = stream.sample(Exponential(2.0), 20_000)

    assert Exponential(2.0).mean == 0.5
    assert samples.mean() == pytest.approx(0.5, rel=0.05)


def test_lognormal_is_parameterised_by_mean(stream):
    dist = LogNormal(10.0, 0.5)
    samples = stream.sample(dist, 50_000)

    assert samples.mean() == pytest.approx(10.0, rel=0.03)
    assert dist.mu == pytest.approx(math.log(10.0) - 0.125)


def test_trunc_lognormal_stays_in_bounds(stream):
    samples = stream.sample(TruncLogNormal(1.35, 0.12, 1.2, 1.8), 5_000)

    assert samples.min() >= 1.2
    assert samples.max() <= 1.8
    assert isinstance(stream.draw(TruncLogNormal(1.35, 0.12, 1.2, 1.8)), float)


def test_constant_and_degenerate_uniform(stream):
    assert stream.draw(Constant(3.0)) == 3.0
    assert stream.draw(Uniform(2.0, 2.0)) == 2.0
    assert list(stream.sample(Constant(1.5), 3)) == [1.5, 1.5, 1.5]


@pytest.mark.parametrize(
    "build",
    [
        lambda: Exponential(0.0),
        lambda: Exponential(-1.0),
        lambda: Uniform(2.0, 1.0),
        lambda: Normal(0.0, -1.0),
        lambda: LogNormal(0.0, 1.0),
        lambda: LogNormal(1.0, 0.0),
        lambda: TruncLogNormal(1.0, 0.1, 2.0, 1.0),
        lambda: Constant(math.inf),
    ],
)
def test_invalid_distribution_parameters(build):
    with pytest.raises(InvalidDistribution):
        build()


def test_geometric_rejects_invalid_probability(stream):
    with pytest.raises(InvalidDistribution):
        stream.geometric(0.0)
    with pytest.raises(InvalidDistribution):
        stream.geometric(1.5)
    assert stream.geometric(1.0) == 1


def test_distribution_config_builds():
    dist = DistributionConfig(kind="trunc_lognormal", median=1.0, sigma=0.02, low=0.96, high=1.04)

    assert isinstance(dist.build(), TruncLogNormal)
    assert DistributionConfig(kind="exponential", rate=3.0).build() == Exponential(3.0)


def test_distribution_config_missing_parameter():
    with pytest.raises(InvalidDistribution):
        DistributionConfig(kind="uniform", low=1.0).build()


def test_pending_counts_only_live_events(engine):
    engine.on("tick", lambda e: None)
    fired = engine.schedule(1.0, "tick")
    drop = engine.schedule(2.0, "tick")
    engine.schedule(3.0, "tick")
    engine.run_until(1.0)

    engine.cancel(drop)
    engine.cancel(drop)
    engine.cancel(fired)

    assert engine.pending() == 1
