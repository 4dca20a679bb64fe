"""Two-tier hierarchical rate limiter for inter-layer traffic.

Tier one is a bandwidth allocator: the configured inter-layer budget

    B_avail = limit_mbps * 1024^2 / 8        [bytes/s]

is divided among the registered publishers of one client (a node or a
layer). Publishers whose observed max payload is below
``large_threshold`` allocate first, in descending declared demand
D = rate * size * alpha (ties by topic name); each receives

    r_alloc = min(r_adv, B_rem / (s * alpha), beta * B_avail / (s * alpha))
    B_rem  -= r_alloc * s * alpha

Large publishers allocate from the remainder the same way, then get a
starvation floor of min(min_rate_hz, r_adv): a large topic is never
silenced outright, even if that overcommits the budget (the overshoot
is reported, not hidden).

Tier two is one token bucket per topic refilled at its allocated rate:

    T = min(capacity, T + rate * dt);  grant iff T >= 1, consuming 1.

Buckets start full, so a topic may open with a burst of ``capacity``
messages. A denied acquire means the frame is dropped, never queued.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .monitor import MetricsRegistry

BYTES_PER_MBIT = 1024 * 1024 / 8


@dataclass(frozen=True)
class RateLimitConfig:
    limit_mbps: float = 160.0
    alpha: float = 1.02
    beta: float = 0.95
    min_rate_hz: float = 2.0
    bucket_capacity: float = 2.0
    large_threshold: int = 65536
    compression_level: int = 10

    def __post_init__(self) -> None:
        if self.limit_mbps <= 0:
            raise ValueError("limit_mbps must be > 0")
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1 (headroom multiplier)")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")
        if self.min_rate_hz <= 0:
            raise ValueError("min_rate_hz must be > 0")
        if self.bucket_capacity < 1:
            raise ValueError("bucket_capacity must be >= 1")
        if self.large_threshold <= 0:
            raise ValueError("large_threshold must be > 0")
        if not 0 <= self.compression_level <= 16:
            raise ValueError("compression_level must be in [0, 16]")

    def to_obj(self) -> dict[str, Any]:
        return {
            "limit_mbps": self.limit_mbps,
            "alpha": self.alpha,
            "beta": self.beta,
            "min_rate_hz": self.min_rate_hz,
            "bucket_capacity": self.bucket_capacity,
            "large_threshold": self.large_threshold,
            "compression_level": self.compression_level,
        }

    @classmethod
    def from_obj(cls, obj: Mapping[str, Any]) -> "RateLimitConfig":
        base = cls().to_obj()
        unknown = set(obj) - set(base)
        if unknown:
            raise ValueError(f"unknown rate_limit keys: {sorted(unknown)}")
        base.update(obj)
        return cls(**base)


def available_bandwidth(cfg: RateLimitConfig) -> float:
    """Inter-layer budget in bytes/s."""
    return cfg.limit_mbps * BYTES_PER_MBIT


@dataclass
class PublisherRecord:
    """One registered publisher: declared rate plus running max size.

    ``advertised_rate`` 0 means unknown (unbounded demand, lowest
    priority); ``max_size`` 0 means unknown (counted as 1 byte until
    ``observe_size`` raises it).
    """

    topic: str
    advertised_rate: float = 0.0
    max_size: int = 0

    def __post_init__(self) -> None:
        if not self.topic:
            raise ValueError("empty topic")
        if self.advertised_rate < 0 or self.max_size < 0:
            raise ValueError("advertised_rate/max_size must be >= 0")


@dataclass(frozen=True)
class PublisherAllocation:
    topic: str
    allocated_rate: float
    demand: float  # declared bytes/s including headroom: r_adv * s * alpha
    large: bool
    floored: bool = False


@dataclass(frozen=True)
class AllocationResult:
    allocations: dict[str, PublisherAllocation]
    available: float
    remaining: float  # bytes/s left after all grants; negative = overcommitted

    def __getitem__(self, topic: str) -> PublisherAllocation:
        return self.allocations[topic]

    def __contains__(self, topic: str) -> bool:
        return topic in self.allocations

    def rates(self) -> dict[str, float]:
        return {t: a.allocated_rate for t, a in self.allocations.items()}


def allocate(cfg: RateLimitConfig, publishers: Iterable[PublisherRecord]) -> AllocationResult:
    """Run the two-phase allocation over one client's publishers.

    Deterministic: the result depends only on (cfg, publisher set),
    never on registration order.
    """
    pubs = list(publishers)
    seen: set[str] = set()
    for p in pubs:
        if p.topic in seen:
            raise ValueError(f"duplicate publisher topic {p.topic!r}")
        seen.add(p.topic)

    b_avail = available_bandwidth(cfg)
    b_rem = b_avail
    allocations: dict[str, PublisherAllocation] = {}

    def size_of(p: PublisherRecord) -> int:
        return max(1, p.max_size)

    def demand_of(p: PublisherRecord) -> float:
        return p.advertised_rate * size_of(p) * cfg.alpha

    standard = [p for p in pubs if size_of(p) < cfg.large_threshold]
    large = [p for p in pubs if size_of(p) >= cfg.large_threshold]

    for group, is_large in ((standard, False), (large, True)):
        group.sort(key=lambda p: (-demand_of(p), p.topic))
        for p in group:
            s = size_of(p) * cfg.alpha
            r_adv = p.advertised_rate if p.advertised_rate > 0 else math.inf
            r = min(r_adv, b_rem / s, cfg.beta * b_avail / s)
            r = max(r, 0.0)
            floored = False
            if is_large:
                floor = min(cfg.min_rate_hz, r_adv)
                if r < floor:
                    r = floor
                    floored = True
            b_rem -= r * s
            allocations[p.topic] = PublisherAllocation(
                topic=p.topic,
                allocated_rate=r,
                demand=demand_of(p),
                large=is_large,
                floored=floored,
            )
    return AllocationResult(allocations, b_avail, b_rem)


class TokenBucket:
    """Continuous-refill token bucket in virtual time (ns)."""

    __slots__ = ("rate", "capacity", "tokens", "updated_at")

    def __init__(self, rate: float, capacity: float, now: int = 0, tokens: float | None = None):
        if rate < 0 or capacity < 1:
            raise ValueError("rate must be >= 0 and capacity >= 1")
        self.rate = rate
        self.capacity = capacity
        self.tokens = capacity if tokens is None else tokens
        self.updated_at = now

    def _refill(self, now: int) -> None:
        if now > self.updated_at:
            self.tokens = min(self.capacity, self.tokens + self.rate * (now - self.updated_at) / 1e9)
        self.updated_at = now

    def try_acquire(self, now: int) -> bool:
        self._refill(now)
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False

    def set_rate(self, rate: float, now: int) -> None:
        """Change the refill rate, settling accrual first; tokens persist."""
        self._refill(now)
        self.rate = rate


def try_acquire(bucket: TokenBucket, now: int) -> bool:
    return bucket.try_acquire(now)


class HierarchicalLimiter:
    """Allocator plus per-topic buckets for one client (node or layer).

    Registration changes and size observations trigger a reallocation;
    buckets of retained topics keep their token balance across
    reallocations, new topics start with a full bucket.
    """

    def __init__(self, cfg: RateLimitConfig, clock, client: str = "",
                 registry: MetricsRegistry | None = None):
        self.cfg = cfg
        self.clock = clock
        self.client = client
        self.registry = registry
        self.records: dict[str, PublisherRecord] = {}
        self.result: AllocationResult = allocate(cfg, ())
        self.buckets: dict[str, TokenBucket] = {}

    # -- registration ----------------------------------------------------

    def sync_publishers(self, wanted: Mapping[str, tuple[float, int]]) -> bool:
        """Reconcile the registered set to ``wanted`` {topic: (rate, size)}.

        Observed max sizes never shrink while a topic stays registered.
        Returns True when anything changed (a reallocation happened).
        """
        changed = False
        for topic in list(self.records):
            if topic not in wanted:
                del self.records[topic]
                changed = True
        for topic, (rate, size) in wanted.items():
            rec = self.records.get(topic)
            if rec is None:
                self.records[topic] = PublisherRecord(topic, rate, size)
                changed = True
            else:
                if rec.advertised_rate != rate:
                    rec.advertised_rate = rate
                    changed = True
                if size > rec.max_size:
                    rec.max_size = size
                    changed = True
        if changed:
            self._reallocate()
        return changed

    def register(self, topic: str, advertised_rate: float = 0.0, max_size: int = 0) -> None:
        wanted = {t: (r.advertised_rate, r.max_size) for t, r in self.records.items()}
        rec = self.records.get(topic)
        if rec is not None:
            wanted[topic] = (advertised_rate, max(max_size, rec.max_size))
        else:
            wanted[topic] = (advertised_rate, max_size)
        self.sync_publishers(wanted)

    def remove(self, topic: str) -> None:
        wanted = {t: (r.advertised_rate, r.max_size) for t, r in self.records.items()}
        wanted.pop(topic, None)
        self.sync_publishers(wanted)

    def observe_size(self, topic: str, size: int) -> bool:
        """Grow a topic's max size from a live payload; True if reallocated."""
        rec = self.records.get(topic)
        if rec is None:
            self.records[topic] = PublisherRecord(topic, 0.0, size)
            self._reallocate()
            return True
        if size > rec.max_size:
            rec.max_size = size
            self._reallocate()
            return True
        return False

    def reconfigure(self, cfg: RateLimitConfig) -> None:
        if cfg != self.cfg:
            self.cfg = cfg
            self._reallocate()

    # -- admission ---------------------------------------------------------

    def allocation(self, topic: str) -> PublisherAllocation | None:
        return self.result.allocations.get(topic)

    def try_acquire(self, topic: str) -> bool:
        bucket = self.buckets.get(topic)
        if bucket is None:
            # unregistered talker: admit it as unknown rate/size first
            self.register(topic)
            bucket = self.buckets[topic]
        granted = bucket.try_acquire(self.clock.now)
        if not granted and self.registry is not None:
            self.registry.inc("ratelimit.denied", {"client": self.client, "topic": topic})
        return granted

    def _reallocate(self) -> None:
        now = self.clock.now
        self.result = allocate(self.cfg, self.records.values())
        for topic in list(self.buckets):
            if topic not in self.result.allocations:
                del self.buckets[topic]
        for topic, alloc in self.result.allocations.items():
            bucket = self.buckets.get(topic)
            if bucket is None:
                self.buckets[topic] = TokenBucket(alloc.allocated_rate, self.cfg.bucket_capacity, now)
            else:
                bucket.set_rate(alloc.allocated_rate, now)
        if self.registry is not None:
            self.registry.inc("ratelimit.realloc", {"client": self.client})
            for topic, alloc in self.result.allocations.items():
                self.registry.observe(
                    "ratelimit.alloc_hz", {"client": self.client, "topic": topic},
                    alloc.allocated_rate,
                )
            overcommit = max(0.0, -self.result.remaining)
            self.registry.observe("ratelimit.overcommit_bytes", {"client": self.client}, overcommit)
