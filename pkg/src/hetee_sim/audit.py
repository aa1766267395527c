"""Append-only controller audit log."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator


class EventKind(enum.Enum):
    WORLD_SWITCH = "WorldSwitch"
    TASK_SWITCH = "TaskSwitch"
    CLEANUP = "Cleanup"
    QUEUE_CREATED = "QueueCreated"
    QUEUE_DESTROYED = "QueueDestroyed"
    PREEMPTION = "Preemption"


@dataclass(frozen=True)
class AuditEvent:
    time_ns: int
    kind: EventKind
    device: str | None = None
    task_id: int | None = None
    detail: dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        return {
            "time_ns": self.time_ns,
            "kind": self.kind.value,
            "device": self.device,
            "task_id": self.task_id,
            **{k: self.detail[k] for k in sorted(self.detail)},
        }


class AuditLog:
    def __init__(self):
        self._events: list[AuditEvent] = []

    def append(self, event: AuditEvent) -> None:
        self._events.append(event)

    def record(self, time_ns: int, kind: EventKind, device: str | None = None, task_id: int | None = None, **detail: Any) -> AuditEvent:
        event = AuditEvent(time_ns, kind, device, task_id, detail)
        self._events.append(event)
        return event

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[AuditEvent]:
        return iter(self.ordered())

    def ordered(self) -> list[AuditEvent]:
        """Events by virtual time, ties broken by arrival."""
        return sorted(self._events, key=lambda e: e.time_ns)

    def for_device(self, device: str) -> list[AuditEvent]:
        return [e for e in self.ordered() if e.device == device]

    def of_kind(self, *kinds: EventKind) -> list[AuditEvent]:
        return [e for e in self.ordered() if e.kind in kinds]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_record(), sort_keys=True) + "\n" for e in self.ordered())


def cleanup_precedes_switches(events: Iterable[AuditEvent]) -> list[AuditEvent]:
    """Switch events NOT immediately preceded (per device) by a clean Cleanup."""
    last: dict[str, AuditEvent] = {}
    bad = []
    for e in events:
        if e.device is None:
            continue
        if e.kind in (EventKind.WORLD_SWITCH, EventKind.TASK_SWITCH):
            prev = last.get(e.device)
            if prev is None or prev.kind is not EventKind.CLEANUP or prev.detail.get("residual"):
                bad.append(e)
        last[e.device] = e
    return bad
