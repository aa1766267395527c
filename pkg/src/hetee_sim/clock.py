"""Virtual time.

Time is kept in integer nanoseconds so that latency breakdowns add up
exactly. Helpers convert from the microsecond/millisecond figures used in
configuration files.
"""

from __future__ import annotations

from decimal import Decimal

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def us_to_ns(us: float | int | str | Decimal) -> int:
    return int((Decimal(str(us)) * NS_PER_US).to_integral_value())


def ms_to_ns(ms: float | int | str | Decimal) -> int:
    return int((Decimal(str(ms)) * NS_PER_MS).to_integral_value())


def ns_to_us(ns: int) -> float:
    return ns / NS_PER_US


def ns_to_ms(ns: int) -> float:
    return ns / NS_PER_MS


def transfer_ns(nbytes: int, bytes_per_s: int | None) -> int:
    """Time to move ``nbytes`` at ``bytes_per_s``, rounded up to whole ns.

    ``None`` (or 0) bandwidth means the transfer is free.
    """
    if not bytes_per_s or nbytes <= 0:
        return 0
    return -(-nbytes * NS_PER_S // bytes_per_s)


class VirtualClock:
    """Monotonic high-water-mark clock.

    Individual resources (links, devices, the controller CPU) keep their own
    ``free_at`` timelines; the clock records the latest instant any of them
    has reached.
    """

    def __init__(self, start_ns: int = 0):
        self._now = start_ns

    @property
    def now(self) -> int:
        return self._now

    def advance(self, delta_ns: int) -> int:
        if delta_ns < 0:
            raise ValueError("cannot move virtual time backwards")
        self._now += delta_ns
        return self._now

    def advance_to(self, t_ns: int) -> int:
        if t_ns > self._now:
            self._now = t_ns
        return self._now

    def __repr__(self) -> str:
        return f"VirtualClock(now={self._now}ns)"
