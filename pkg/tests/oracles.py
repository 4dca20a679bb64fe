"""Independent reference implementations used to check the real ones.

Deliberately written as plain step-by-step transcriptions of the
allocation and token-bucket equations, sharing no code with the package
so a bug cannot hide in both.
"""

from __future__ import annotations

import math


def oracle_allocate(
    limit_mbps: float,
    publishers: list[tuple[str, float, int]],
    alpha: float = 1.02,
    beta: float = 0.95,
    min_rate_hz: float = 2.0,
    large_threshold: int = 65536,
) -> dict[str, float]:
    """Evaluate the bandwidth split for (topic, rate_hz, size) triples.

    Budget in bytes/s comes straight from the megabit limit.  Standard
    (small) publishers are served in descending declared demand, ties by
    topic; each gets the least of its advertised rate, what the budget
    still covers, and the per-publisher share cap.  Large publishers
    follow from the remainder and are finally lifted to the starvation
    floor.  Returns {topic: allocated_hz}.
    """
    budget = limit_mbps * 1024 * 1024 / 8.0

    small = []
    big = []
    for topic, rate_hz, size in publishers:
        eff_size = size if size >= 1 else 1
        demand = rate_hz * eff_size * alpha
        row = (topic, rate_hz, eff_size, demand)
        (big if eff_size >= large_threshold else small).append(row)

    small.sort(key=lambda row: (-row[3], row[0]))
    big.sort(key=lambda row: (-row[3], row[0]))

    remaining = budget
    out: dict[str, float] = {}
    for phase, rows in (("small", small), ("big", big)):
        for topic, rate_hz, eff_size, _ in rows:
            wanted = rate_hz if rate_hz > 0 else math.inf
            per_msg = eff_size * alpha
            granted = min(wanted, remaining / per_msg, beta * budget / per_msg)
            if granted < 0.0:
                granted = 0.0
            if phase == "big":
                floor = min(min_rate_hz, wanted)
                if granted < floor:
                    granted = floor
            remaining -= granted * per_msg
            out[topic] = granted
    return out


def oracle_bucket_replay(
    rate_hz: float,
    capacity: float,
    attempt_times_ns: list[int],
) -> list[bool]:
    """Replay acquire attempts against a continuously refilled bucket.

    Starts full.  Each attempt first accrues rate * elapsed tokens

    (clipped at capacity), then succeeds iff a whole token is present.
    """
    tokens = capacity
    last = 0
    grants = []
    for t in attempt_times_ns:
        if t > last:
            tokens = min(capacity, tokens + rate_hz * (t - last) / 1e9)
        last = t
        if tokens >= 1.0:
            tokens -= 1.0
            grants.append(True)
        else:
            grants.append(False)
    return grants


def oracle_single_large_rate(
    limit_mbps: float,
    size: int,
    rate_adv: float,
    alpha: float = 1.02,
    beta: float = 0.95,
) -> float:
    """Closed-form single large publisher: no competition, no floor hit."""
    budget = limit_mbps * 1024 * 1024 / 8.0
    return min(rate_adv, budget / (size * alpha), beta * budget / (size * alpha))
