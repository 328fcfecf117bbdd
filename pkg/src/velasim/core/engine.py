"""
Deterministic discrete-event engine.

The engine owns the simulation clock and a priority queue of events ordered
by ``(time, sequence)``. Handlers are registered per event kind and run in
registration order. Random numbers come from named :class:`RngStream`
objects so that adding a model never perturbs the draws of another.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import time as wallclock
from collections import defaultdict
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Annotated, Any, Literal, Protocol

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import InvalidDistribution, SchedulingInPast

logger = structlog.stdlib.get_logger("velasim.engine")

TIME_TOLERANCE = 1e-9
SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True, order=True, slots=True)
class EventRecord:
    time: float
    sequence: int
    kind: str = field(compare=False)
    target: str = field(compare=False, default="")
    payload: Any = field(compare=False, default=None)

    def log_line(self) -> str:
        return f"{self.time:.9f}|{self.sequence}|{self.kind}|{self.target}"


@dataclass(frozen=True, slots=True)
class SimStats:
    events_dispatched: int
    clock: float
    # Not part of any report; varies between identical runs.
    wall_time: float


type Handler = Callable[[EventRecord], None]


class Engine:
    def __init__(self, *, keep_log: bool = True) -> None:
        self._now = 0.0
        self._queue: list[EventRecord] = []
        self._sequence = 0
        self._cancelled: set[int] = set()
        self._handlers: dict[str, list[Handler]] = defaultdict(list)
        self.keep_log = keep_log
        self.event_log: list[str] = []
        self.dispatched = 0

    @property
    def now(self) -> float:
        return self._now

    def on(self, kind: str, handler: Handler) -> None:
        self._handlers[kind].append(handler)

    def schedule(self, time: float, kind: str, target: str = "", payload: Any = None) -> int:
        if math.isnan(time) or time < self._now - TIME_TOLERANCE:
            raise SchedulingInPast(
                f"cannot schedule {kind!r} at t={time} (now={self._now})",
                details={"time": time, "now": self._now, "kind": kind},
            )
        self._sequence += 1
        event = EventRecord(max(time, self._now), self._sequence, kind, target, payload)
        heapq.heappush(self._queue, event)
        return event.sequence

    def schedule_in(self, delay: float, kind: str, target: str = "", payload: Any = None) -> int:
        return self.schedule(self._now + delay, kind, target, payload)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def pending(self) -> int:
        return sum(e.sequence not in self._cancelled for e in self._queue)

    def run_until(self, t_end: float) -> SimStats:
        if t_end < self._now - TIME_TOLERANCE:
            raise SchedulingInPast(
                f"cannot run until t={t_end} (now={self._now})",
                details={"time": t_end, "now": self._now},
            )
        started = wallclock.perf_counter()
        dispatched = 0
        while self._queue and self._queue[0].time <= t_end + TIME_TOLERANCE:
            event = heapq.heappop(self._queue)
            if event.sequence in self._cancelled:
                self._cancelled.discard(event.sequence)
                continue
            self._now = max(self._now, event.time)
            if self.keep_log:
                self.event_log.append(event.log_line())
            for handler in self._handlers.get(event.kind, ()):
                handler(event)
            dispatched += 1
        self._now = max(self._now, t_end)
        self.dispatched += dispatched
        logger.debug("run_until", t_end=t_end, dispatched=dispatched)
        return SimStats(
            events_dispatched=dispatched,
            clock=self._now,
            wall_time=wallclock.perf_counter() - started,
        )


# === Distributions ===


class Distribution(Protocol):
    def sample(self, generator: np.random.Generator, size: int | None = None) -> Any: ...


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidDistribution(message)


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True, slots=True)
class Constant:
    value: float

    def __post_init__(self) -> None:
        _require(_finite(self.value), f"constant must be finite, got {self.value}")

    def sample(self, generator: np.random.Generator, size: int | None = None) -> Any:
        return self.value if size is None else np.full(size, self.value)


@dataclass(frozen=True, slots=True)
class Exponential:
    rate: float

    def __post_init__(self) -> None:
        _require(_finite(self.rate) and self.rate > 0, f"rate must be > 0, got {self.rate}")

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    def sample(self, generator: np.random.Generator, size: int | None = None) -> Any:
        return generator.exponential(1.0 / self.rate, size)


@dataclass(frozen=True, slots=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self) -> None:
        _require(
            _finite(self.low, self.high) and self.low <= self.high,
            f"bounds must be ordered, got [{self.low}, {self.high}]",
        )

    @property
    def mean(self) -> float:
        return (self.low + self.high) / 2

    def sample(self, generator: np.random.Generator, size: int | None = None) -> Any:
        if self.low == self.high:
            return Constant(self.low).sample(generator, size)
        return generator.uniform(self.low, self.high, size)


@dataclass(frozen=True, slots=True)
class Normal:
    mean: float
    std: float

    def __post_init__(self) -> None:
        _require(
            _finite(self.mean, self.std) and self.std >= 0, f"std must be >= 0, got {self.std}"
        )

    def sample(self, generator: np.random.Generator, size: int | None = None) -> Any:
        return generator.normal(self.mean, self.std, size)


@dataclass(frozen=True, slots=True)
class LogNormal:
    """Lognormal parameterised by the mean of the variable, not of its log."""

    mean: float
    sigma: float

    def __post_init__(self) -> None:
        _require(_finite(self.mean) and self.mean > 0, f"mean must be > 0, got {self.mean}")
        _require(_finite(self.sigma) and self.sigma > 0, f"sigma must be > 0, got {self.sigma}")

    @property
    def mu(self) -> float:
        return math.log(self.mean) - self.sigma**2 / 2

    def sample(self, generator: np.random.Generator, size: int | None = None) -> Any:
        return generator.lognormal(self.mu, self.sigma, size)


@dataclass(frozen=True, slots=True)
class TruncLogNormal:
    median: float
    sigma: float
    low: float
    high: float

    def __post_init__(self) -> None:
        _require(
            _finite(self.median, self.sigma, self.low, self.high)
            and self.median > 0
            and self.sigma > 0,
            "median and sigma must be > 0",
        )
        _require(0 < self.low < self.high, f"bounds must be ordered, got [{self.low}, {self.high}]")

    def sample(self, generator: np.random.Generator, size: int | None = None) -> Any:
        count = 1 if size is None else size
        out = np.empty(count)
        filled = 0
        mu = math.log(self.median)
        while filled < count:
            batch = generator.lognormal(mu, self.sigma, max(16, 2 * (count - filled)))
            keep = batch[(batch >= self.low) & (batch <= self.high)][: count - filled]
            out[filled : filled + keep.size] = keep
            filled += keep.size
        return float(out[0]) if size is None else out


class DistributionConfig(BaseModel):
    """Scenario-file form of a distribution."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "exponential", "uniform", "normal", "lognormal", "trunc_lognormal"]
    value: float | None = None
    rate: Annotated[float, Field(gt=0)] | None = None
    mean: float | None = None
    std: Annotated[float, Field(ge=0)] | None = None
    sigma: Annotated[float, Field(gt=0)] | None = None
    median: Annotated[float, Field(gt=0)] | None = None
    low: float | None = None
    high: float | None = None

    def build(self) -> Distribution:
        try:
            match self.kind:
                case "constant":
                    return Constant(_given(self.value))
                case "exponential":
                    return Exponential(_given(self.rate))
                case "uniform":
                    return Uniform(_given(self.low), _given(self.high))
                case "normal":
                    return Normal(_given(self.mean), _given(self.std))
                case "lognormal":
                    return LogNormal(_given(self.mean), _given(self.sigma))
                case "trunc_lognormal":
                    return TruncLogNormal(
                        _given(self.median), _given(self.sigma), _given(self.low), _given(self.high)
                    )
        except TypeError as e:
            raise InvalidDistribution(f"{self.kind}: {e}") from e
        raise InvalidDistribution(f"unknown distribution {self.kind!r}")


def _given(value: float | None) -> float:
    if value is None:
        raise TypeError("missing parameter")
    return value


# === Random streams ===


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "big")


class RngStream:
    """
    Named, seeded random stream.

    The underlying generator is seeded from ``(seed, hash(name))`` so two
    streams with the same seed and different names are independent, and a
    stream's draws never depend on what other streams did.
    """

    def __init__(self, name: str, seed: int) -> None:
        self.name = name
        self.seed = seed & SEED_MASK
        self.draw_count = 0
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(_name_key(name),))
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"RngStream(name={self.name!r}, seed={self.seed}, draws={self.draw_count})"

    def child(self, key: str | int) -> RngStream:
        return RngStream(f"{self.name}/{key}", self.seed)

    def draw(self, dist: Distribution) -> float:
        self.draw_count += 1
        return float(dist.sample(self._generator))

    def sample(self, dist: Distribution, size: int) -> np.ndarray:
        self.draw_count += size
        return np.asarray(dist.sample(self._generator, size), dtype=float)

    def random(self) -> float:
        self.draw_count += 1
        return float(self._generator.random())

    def integers(self, high: int) -> int:
        self.draw_count += 1
        return int(self._generator.integers(high))

    def poisson(self, lam: float, size: int) -> np.ndarray:
        self.draw_count += size
        return self._generator.poisson(lam, size)

    def binomial(self, n: int, p: float) -> int:
        self.draw_count += 1
        return int(self._generator.binomial(n, p))

    def geometric(self, p: float) -> int:
        if not 0 < p <= 1:
            raise InvalidDistribution(f"geometric p must be in (0, 1], got {p}")
        self.draw_count += 1
        return int(self._generator.geometric(p))


def rng_draw(stream: RngStream, dist: Distribution) -> float:
    return stream.draw(dist)
