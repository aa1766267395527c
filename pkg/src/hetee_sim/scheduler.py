"""Priority-preemptive allocation of the shared accelerator pool.

The policy is a pure function of the pool snapshot and the pending
requests, so it can be model-checked in isolation:

1. Secure requests are served first, High before Normal, FIFO by arrival
   within a priority. Host (best-effort) requests come last, FIFO.
2. A secure request draws devices from, in order of preference:
   free secure-pool devices, idle insecure devices, and (High only)
   busy insecure devices, then devices held by Normal enclaves. Ties go to
   the lower device id; among Normal victims the youngest enclave (highest
   task id) loses first.
3. A host request only receives free secure-pool devices.
4. Requests may be partially served; no device is handed out twice.

Each device ends up with at most one holder.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

from .protocol import Priority


class DeviceState(enum.Enum):
    INSECURE_IDLE = "insecure_idle"
    INSECURE_BUSY = "insecure_busy"
    SECURE_FREE = "secure_free"
    HELD = "held"


@dataclass(frozen=True)
class DeviceSlot:
    device: str
    state: DeviceState
    holder: int | None = None
    holder_priority: Priority | None = None

    def __post_init__(self):
        if (self.state is DeviceState.HELD) != (self.holder is not None):
            raise ValueError("exactly the HELD state carries a holder")


class Origin(enum.Enum):
    SECURE_ENCLAVE = "secure"
    HOST_INSECURE = "host"


@dataclass(frozen=True)
class SchedulerRequest:
    req_id: int
    origin: Origin
    priority: Priority
    demand: int
    task_id: int | None = None
    host: str | None = None

    def __post_init__(self):
        if self.origin is Origin.HOST_INSECURE and self.priority is not Priority.BEST_EFFORT:
            raise ValueError("host requests are always best-effort")
        if self.origin is Origin.SECURE_ENCLAVE and self.priority is Priority.BEST_EFFORT:
            raise ValueError("secure requests are High or Normal")
        if self.demand < 0:
            raise ValueError("demand must be non-negative")


class Action(enum.Enum):
    GRANT_FREE = "grant_free"  # secure pool -> enclave (task switch)
    CLAIM_IDLE = "claim_idle"  # idle insecure -> enclave (world switch)
    PREEMPT_INSECURE = "preempt_insecure"  # halt host work -> enclave (world switch)
    PREEMPT_SECURE = "preempt_secure"  # Normal enclave -> High enclave (task switch)
    RELEASE_TO_HOST = "release_to_host"  # secure pool -> host (world switch)


@dataclass(frozen=True)
class Decision:
    action: Action
    device: str
    req_id: int
    task_id: int | None = None
    victim: int | None = None


@dataclass
class ScheduleResult:
    decisions: list[Decision] = field(default_factory=list)
    granted: dict[int, int] = field(default_factory=dict)

    @property
    def preemptions(self) -> list[Decision]:
        return [d for d in self.decisions if d.action in (Action.PREEMPT_INSECURE, Action.PREEMPT_SECURE)]


_RANK = {Priority.HIGH: 0, Priority.NORMAL: 1, Priority.BEST_EFFORT: 2}


def service_order(pending: Sequence[SchedulerRequest]) -> list[SchedulerRequest]:
    return sorted(pending, key=lambda r: (_RANK[r.priority], r.req_id))


def _candidates(req: SchedulerRequest, free: list[DeviceSlot]) -> list[tuple[Action, DeviceSlot]]:
    by_id = lambda s: s.device  # noqa: E731
    pick = lambda st: sorted((s for s in free if s.state is st), key=by_id)  # noqa: E731
    if req.origin is Origin.HOST_INSECURE:
        return [(Action.RELEASE_TO_HOST, s) for s in pick(DeviceState.SECURE_FREE)]
    out = [(Action.GRANT_FREE, s) for s in pick(DeviceState.SECURE_FREE)]
    out += [(Action.CLAIM_IDLE, s) for s in pick(DeviceState.INSECURE_IDLE)]
    if req.priority is Priority.HIGH:
        out += [(Action.PREEMPT_INSECURE, s) for s in pick(DeviceState.INSECURE_BUSY)]
        victims = [
            s
            for s in free
            if s.state is DeviceState.HELD
            and s.holder_priority is Priority.NORMAL
            and s.holder != req.task_id
        ]
        victims.sort(key=lambda s: (-s.holder, s.device))
        out += [(Action.PREEMPT_SECURE, s) for s in victims]
    return out


def schedule(pool: Sequence[DeviceSlot], pending: Sequence[SchedulerRequest]) -> ScheduleResult:
    result = ScheduleResult()
    available = list(pool)
    for req in service_order(pending):
        granted = 0
        for action, slot in _candidates(req, available):
            if granted >= req.demand:
                break
            available.remove(slot)
            result.decisions.append(
                Decision(
                    action,
                    slot.device,
                    req.req_id,
                    req.task_id,
                    slot.holder if action is Action.PREEMPT_SECURE else None,
                )
            )
            granted += 1
        result.granted[req.req_id] = granted
    return result


def apply(pool: Sequence[DeviceSlot], pending: Sequence[SchedulerRequest], result: ScheduleResult) -> list[DeviceSlot]:
    """Pool snapshot after the decisions take effect."""
    reqs = {r.req_id: r for r in pending}
    after = {s.device: s for s in pool}
    for d in result.decisions:
        req = reqs[d.req_id]
        if d.action is Action.RELEASE_TO_HOST:
            after[d.device] = DeviceSlot(d.device, DeviceState.INSECURE_IDLE)
        else:
            after[d.device] = DeviceSlot(d.device, DeviceState.HELD, req.task_id, req.priority)
    return [after[s.device] for s in pool]
