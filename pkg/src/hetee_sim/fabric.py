"""Software-defined PCIe switch.

Models the parts of an ExpressFabric-style switch the controller relies on:

* a routing table deciding which endpoint owns each accelerator, and in which
  world (secure/insecure) it lives;
* a management port, represented by a single capability token, which is the
  only way to change that table;
* lane accounting for one switch chip;
* address windows that expose a controller-side task queue to one host;
* a host-to-host DMA engine with an affine latency model on the virtual clock.
"""

from __future__ import annotations

import enum
import hmac
import itertools
import logging
import secrets
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .clock import NS_PER_US, VirtualClock, transfer_ns, us_to_ns
from .errors import (
    AccessDenied,
    FabricError,
    InvalidToken,
    LaneBudgetExceeded,
    NotRouted,
    UnknownDevice,
    UnknownEndpoint,
    UnknownQueue,
)

logger = logging.getLogger(__name__)


class EndpointKind(enum.Enum):
    HOST = "host"
    CONTROLLER = "controller"
    DEVICE = "device"


@dataclass(frozen=True, order=True)
class EndpointId:
    id: str
    kind: EndpointKind = field(compare=False)

    def __str__(self) -> str:
        return self.id


def host(name: str) -> EndpointId:
    return EndpointId(name, EndpointKind.HOST)


def device(name: str) -> EndpointId:
    return EndpointId(name, EndpointKind.DEVICE)


def controller(name: str = "controller") -> EndpointId:
    return EndpointId(name, EndpointKind.CONTROLLER)


class World(enum.Enum):
    INSECURE = "insecure"
    SECURE = "secure"


@dataclass(frozen=True)
class Route:
    owner: EndpointId
    world: World


@dataclass(frozen=True)
class ManagementToken:
    """Capability for the switch's management port."""

    secret: bytes = field(repr=False)


@dataclass(frozen=True)
class AddressWindow:
    host: EndpointId
    queue_id: int
    window_id: int


@dataclass(frozen=True)
class DmaRecord:
    src: EndpointId
    dst: EndpointId
    nbytes: int
    start_ns: int
    end_ns: int

    @property
    def latency_ns(self) -> int:
        return self.end_ns - self.start_ns

    @property
    def latency_us(self) -> float:
        return self.latency_ns / NS_PER_US


@dataclass(frozen=True)
class RouteEvent:
    """One accepted routing-table change (append-only audit trail)."""

    time_ns: int
    device: EndpointId
    old: Route | None
    new: Route | None

    @property
    def old_world(self) -> World | None:
        return self.old.world if self.old else None

    @property
    def new_world(self) -> World | None:
        return self.new.world if self.new else None


@dataclass(frozen=True)
class TapRecord:
    """A frame observed crossing an address window."""

    direction: str  # "to_controller" | "to_host"
    host: EndpointId
    queue_id: int
    data: bytes


@dataclass
class FabricConfig:
    lane_budget: int = 97
    lanes_per_device: int = 16
    # uplinks for host(s) and the controller; 97 - 5*16
    reserved_lanes: int = 17
    dma_base_us: float = 1.0
    dma_bandwidth_bytes_per_s: int | None = 12_000_000_000

    def latency_ns(self, nbytes: int) -> int:
        return us_to_ns(self.dma_base_us) + transfer_ns(nbytes, self.dma_bandwidth_bytes_per_s)


class RoutingTable:
    """Device -> (owner, world), plus lane bookkeeping.

    ``lanes_used`` is maintained incrementally; :meth:`recompute_lanes`
    derives it from scratch for cross-checking.
    """

    def __init__(self, lane_budget: int, reserved_lanes: int):
        self.entries: dict[EndpointId, Route] = {}
        self.device_lanes: dict[EndpointId, int] = {}
        self.lane_budget = lane_budget
        self.reserved_lanes = reserved_lanes
        self.lanes_used = reserved_lanes

    def recompute_lanes(self) -> int:
        return self.reserved_lanes + sum(self.device_lanes[d] for d in self.entries)

    def world(self, dev: EndpointId) -> World | None:
        route = self.entries.get(dev)
        return route.world if route else None

    def snapshot(self) -> dict[EndpointId, Route]:
        return dict(self.entries)


class _Queue:
    """Controller-side memory backing one task queue."""

    def __init__(self, queue_id: int):
        self.queue_id = queue_id
        self.inbound: deque[bytes] = deque()
        self.outbound: deque[bytes] = deque()


class Fabric:
    """Single-switch fabric connecting hosts, the controller and accelerators.

    All mutations happen on the caller's thread; in socket mode the
    controller service is the single writer.
    """

    def __init__(
        self,
        config: FabricConfig | None = None,
        clock: VirtualClock | None = None,
        *,
        controller_id: EndpointId | None = None,
        hosts: Iterable[EndpointId] = (),
        devices: Iterable[EndpointId] = (),
    ):
        self.config = config or FabricConfig()
        self.clock = clock or VirtualClock()
        self.controller_id = controller_id or controller()
        if self.config.reserved_lanes > self.config.lane_budget:
            raise LaneBudgetExceeded("uplink reservation exceeds lane budget")
        self.table = RoutingTable(self.config.lane_budget, self.config.reserved_lanes)
        self._endpoints: dict[str, EndpointId] = {self.controller_id.id: self.controller_id}
        for ep in hosts:
            self._register(ep, EndpointKind.HOST)
        for ep in devices:
            self._register(ep, EndpointKind.DEVICE)
        self._token = ManagementToken(secrets.token_bytes(32))
        self._token_claimed = False
        self.route_log: list[RouteEvent] = []
        self.rejected_calls = 0
        self._queues: dict[int, _Queue] = {}
        self._windows: dict[tuple[EndpointId, int], AddressWindow] = {}
        self._window_ids = itertools.count(1)
        self._link_free: dict[EndpointId, int] = {}
        self.dma_log: list[DmaRecord] = []
        self.tap: list[TapRecord] = []
        # test hook: rewrites frames crossing a window, (direction, data) -> data
        self.intercept: Callable[[str, bytes], bytes] | None = None

    # -- inventory -------------------------------------------------------

    def _register(self, ep: EndpointId, kind: EndpointKind) -> None:
        if ep.kind is not kind:
            raise FabricError(f"{ep} is not a {kind.value}")
        existing = self._endpoints.get(ep.id)
        if existing is not None and existing != ep:
            raise FabricError(f"duplicate endpoint id {ep.id}")
        if existing is not None and existing.kind is not ep.kind:
            raise FabricError(f"endpoint id {ep.id} already used by a {existing.kind.value}")
        self._endpoints[ep.id] = ep

    def endpoint(self, ep_id: str) -> EndpointId:
        try:
            return self._endpoints[ep_id]
        except KeyError:
            raise UnknownEndpoint(ep_id) from None

    @property
    def hosts(self) -> list[EndpointId]:
        return sorted(e for e in self._endpoints.values() if e.kind is EndpointKind.HOST)

    @property
    def devices(self) -> list[EndpointId]:
        return sorted(e for e in self._endpoints.values() if e.kind is EndpointKind.DEVICE)

    def add_host(self, ep: EndpointId) -> None:
        self._register(ep, EndpointKind.HOST)

    # -- management port -------------------------------------------------

    def claim_management_port(self) -> ManagementToken:
        """Hand out the management capability. Works exactly once."""
        if self._token_claimed:
            raise InvalidToken("management port already claimed")
        self._token_claimed = True
        return self._token

    def _check_token(self, token: Any) -> None:
        if not isinstance(token, ManagementToken) or not hmac.compare_digest(
            token.secret, self._token.secret
        ):
            self.rejected_calls += 1
            raise InvalidToken("caller lacks the management capability")

    def add_device(
        self,
        token: ManagementToken,
        dev: EndpointId,
        *,
        owner: EndpointId | None = None,
        world: World = World.INSECURE,
        lanes: int | None = None,
    ) -> RoutingTable:
        """Hot-plug ``dev`` and route it (to the first host by default)."""
        self._check_token(token)
        if dev.id in self._endpoints and self._endpoints[dev.id] in self.table.entries:
            raise FabricError(f"{dev} already attached")
        self._register(dev, EndpointKind.DEVICE)
        if lanes is not None:
            self.table.device_lanes[dev] = lanes
        if owner is None:
            owner = self.controller_id if world is World.SECURE else self.hosts[0]
        return self.configure_route(token, dev, owner, world)

    def remove_device(self, token: ManagementToken, dev: EndpointId) -> RoutingTable:
        """Hot-unplug ``dev``; its lanes are returned to the budget."""
        self._check_token(token)
        dev = self._known_device(dev)
        old = self.table.entries.pop(dev, None)
        if old is not None:
            self.table.lanes_used -= self.table.device_lanes.get(dev, self.config.lanes_per_device)
            self.route_log.append(RouteEvent(self.clock.now, dev, old, None))
        del self._endpoints[dev.id]
        self.table.device_lanes.pop(dev, None)
        return self.table

    def _known_device(self, dev: EndpointId) -> EndpointId:
        ep = self._endpoints.get(dev.id)
        if ep is None or ep.kind is not EndpointKind.DEVICE:
            raise UnknownDevice(dev.id)
        return ep

    def configure_route(
        self, token: ManagementToken, dev: EndpointId, owner: EndpointId, world: World
    ) -> RoutingTable:
        self._check_token(token)
        dev = self._known_device(dev)
        if owner.id not in self._endpoints:
            raise UnknownEndpoint(owner.id)
        if world is World.SECURE and owner.kind is not EndpointKind.CONTROLLER:
            raise FabricError("secure devices must be owned by the controller")
        if world is World.INSECURE and owner.kind is not EndpointKind.HOST:
            raise FabricError("insecure devices must be owned by a host")
        new = Route(owner, world)
        old = self.table.entries.get(dev)
        if old == new:
            return self.table
        if old is None:
            lanes = self.table.device_lanes.setdefault(dev, self.config.lanes_per_device)
            if self.table.lanes_used + lanes > self.table.lane_budget:
                raise LaneBudgetExceeded(
                    f"{dev} needs {lanes} lanes, {self.table.lane_budget - self.table.lanes_used} left"
                )
            self.table.lanes_used += lanes
        self.table.entries[dev] = new
        self.route_log.append(RouteEvent(self.clock.now, dev, old, new))
        logger.debug("route %s: %s -> %s", dev, old, new)
        return self.table

    # -- visibility ------------------------------------------------------

    def enumerate(self, viewer: EndpointId) -> list[EndpointId]:
        """Devices visible to ``viewer`` during bus enumeration, sorted by id.

        Controller-side queues are listed by :meth:`queues`.
        """
        if viewer.id not in self._endpoints:
            raise UnknownEndpoint(viewer.id)
        viewer = self._endpoints[viewer.id]
        if viewer.kind is EndpointKind.DEVICE:
            return []
        return sorted(dev for dev, route in self.table.entries.items() if route.owner == viewer)

    def queues(self) -> list[int]:
        return sorted(self._queues)

    def can_reach(self, a: EndpointId, b: EndpointId) -> bool:
        a = self.endpoint(a.id)
        b = self.endpoint(b.id)
        kinds = {a.kind, b.kind}
        if EndpointKind.DEVICE not in kinds:
            return True
        if kinds == {EndpointKind.DEVICE}:
            return False
        dev, other = (a, b) if a.kind is EndpointKind.DEVICE else (b, a)
        route = self.table.entries.get(dev)
        return route is not None and route.owner == other

    # -- task queue windows ----------------------------------------------

    def register_queue(self, token: ManagementToken, queue_id: int) -> None:
        self._check_token(token)
        if queue_id in self._queues:
            raise FabricError(f"queue {queue_id} already registered")
        self._queues[queue_id] = _Queue(queue_id)

    def destroy_queue(self, token: ManagementToken, queue_id: int) -> None:
        self._check_token(token)
        if queue_id not in self._queues:
            raise UnknownQueue(queue_id)
        del self._queues[queue_id]
        for key in [k for k in self._windows if k[1] == queue_id]:
            del self._windows[key]

    def map_queue_window(
        self, token: ManagementToken, queue_id: int, host_ep: EndpointId
    ) -> AddressWindow:
        self._check_token(token)
        if queue_id not in self._queues:
            raise UnknownQueue(queue_id)
        host_ep = self.endpoint(host_ep.id)
        if host_ep.kind is not EndpointKind.HOST:
            raise FabricError(f"{host_ep} is not a host")
        if any(q == queue_id for (_, q) in self._windows):
            raise FabricError(f"queue {queue_id} already mapped")
        win = AddressWindow(host_ep, queue_id, next(self._window_ids))
        self._windows[(host_ep, queue_id)] = win
        return win

    def _window_queue(self, host_ep: EndpointId, queue_id: int) -> _Queue:
        if (host_ep, queue_id) not in self._windows:
            raise AccessDenied(f"{host_ep} has no window onto queue {queue_id}")
        return self._queues[queue_id]

    def _pass(self, direction: str, host_ep: EndpointId, queue_id: int, data: bytes) -> bytes:
        if self.intercept is not None:
            data = self.intercept(direction, data)
        self.tap.append(TapRecord(direction, host_ep, queue_id, bytes(data)))
        return data

    def window_write(self, host_ep: EndpointId, queue_id: int, data: bytes) -> None:
        """Host pushes one frame into the controller-side queue."""
        q = self._window_queue(host_ep, queue_id)
        q.inbound.append(self._pass("to_controller", host_ep, queue_id, data))

    def window_read(self, host_ep: EndpointId, queue_id: int) -> list[bytes]:
        """Host drains every frame the controller has posted for it."""
        q = self._window_queue(host_ep, queue_id)
        out = list(q.outbound)
        q.outbound.clear()
        return out

    def controller_take(self, token: ManagementToken, queue_id: int) -> list[bytes]:
        self._check_token(token)
        q = self._queues.get(queue_id)
        if q is None:
            raise UnknownQueue(queue_id)
        frames = list(q.inbound)
        q.inbound.clear()
        return frames

    def controller_post(self, token: ManagementToken, queue_id: int, data: bytes) -> None:
        self._check_token(token)
        q = self._queues.get(queue_id)
        if q is None:
            raise UnknownQueue(queue_id)
        host_ep = next((h for (h, qid) in self._windows if qid == queue_id), None)
        if host_ep is None:
            raise AccessDenied(f"queue {queue_id} is not mapped to any host")
        q.outbound.append(self._pass("to_host", host_ep, queue_id, data))

    # -- DMA ---------------------------------------------------------------

    def link_free_at(self, ep: EndpointId) -> int:
        return self._link_free.get(ep, 0)

    def dma_transfer(
        self, src: EndpointId, dst: EndpointId, nbytes: int, *, not_before: int | None = None
    ) -> DmaRecord:
        """Move ``nbytes`` from ``src`` to ``dst``.

        The transfer occupies both endpoints' links; it starts once both are
        free and not before ``not_before`` (default: current virtual time).
        """
        if nbytes < 0:
            raise ValueError("negative transfer size")
        src = self.endpoint(src.id)
        dst = self.endpoint(dst.id)
        if not self.can_reach(src, dst):
            raise NotRouted(f"{src} cannot reach {dst}")
        ready = self.clock.now if not_before is None else not_before
        start = max(ready, self.link_free_at(src), self.link_free_at(dst))
        end = start + self.config.latency_ns(nbytes)
        self._link_free[src] = end
        self._link_free[dst] = end
        self.clock.advance_to(end)
        rec = DmaRecord(src, dst, nbytes, start, end)
        self.dma_log.append(rec)
        return rec
