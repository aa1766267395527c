"""The security controller.

Boots from signed images, owns the fabric's management port, and runs the
task manager: per-client attestation and key agreement, task-queue setup,
enclave program execution on allocated accelerators, result sealing, and
the world-switch service with cleanup on every device hand-over.

All controller state is mutated from one logical event processor: the
methods here are called either directly (deterministic mode) or under the
socket service's lock.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

from .attest import ControllerHandshake, DeviceIdentity, Measurement, SessionKey, measure_boot, verify_image
from .audit import AuditLog, EventKind
from .errors import (
    AccessDenied,
    BootSignatureInvalid,
    CommandAlreadyActive,
    ConfirmationFailed,
    ControllerError,
    DeviceBusy,
    EnclaveNotRunning,
    HandshakeError,
    ParseError,
    ProgramInvalid,
    ProtocolError,
    ResourceExhausted,
    UnknownTask,
)
from .fabric import World
from .protocol import (
    CONTROLLER_TO_HOST,
    HOST_TO_CONTROLLER,
    MAX_BODY,
    PLAIN_NONCE,
    CommandBody,
    ConfigBody,
    ControlBody,
    DataBody,
    Priority,
    ResultBody,
    SeqState,
    TaskEnvelope,
    TaskQueue,
    TaskType,
    frame_plain,
    open_task,
    parse_envelope,
    seal_task,
    serialize_envelope,
    unframe_plain,
)
from .program import TaskProgram
from .scheduler import Action, DeviceSlot, DeviceState, Origin, SchedulerRequest, schedule
from .sim import BootBundle, Platform, fan_out

logger = logging.getLogger(__name__)

# sub-tags of plaintext configuration frames
HS_HELLO = 0x01
HS_QUOTE = 0x02
HS_FINISHED = 0x03
HS_ACK = 0x04
HS_NACK = 0x05
OOB_RELEASE = 0x10
OOB_RELEASE_REPLY = 0x11

HOST_TASK_ID = 0
MAX_PAYLOAD = MAX_BODY - 1


class EnclaveStatus(enum.Enum):
    AWAITING_COMMAND = "AwaitingCommand"
    RUNNING = "Running"
    DRAINING = "Draining"
    CLOSED = "Closed"


@dataclass
class PhaseMarks:
    """Virtual timestamps of the last doorbell that did work for an enclave."""

    received: int = 0
    processed: int = 0
    task_copied: int = 0
    computed: int = 0
    result_copied: int = 0
    emitted: int = 0


class ReorderBuffer:
    """Releases completed items strictly in index order."""

    def __init__(self, start: int = 0):
        self._next = start
        self._held: dict[int, bytes] = {}

    def push(self, index: int, item: bytes) -> list[bytes]:
        if index < self._next or index in self._held:
            raise ValueError(f"duplicate completion for chunk {index}")
        self._held[index] = item
        out = []
        while self._next in self._held:
            out.append(self._held.pop(self._next))
            self._next += 1
        return out

    @property
    def waiting(self) -> int:
        return len(self._held)


@dataclass
class Enclave:
    task_id: int
    queue: TaskQueue
    session: "ControllerSession"
    priority: Priority
    demand: int
    req_id: int
    devices: list[str] = field(default_factory=list)
    input_buffer: bytearray = field(default_factory=bytearray)
    output_buffer: deque = field(default_factory=deque)
    program: TaskProgram | None = None
    status: EnclaveStatus = EnclaveStatus.AWAITING_COMMAND
    next_chunk: int = 0
    reorder: ReorderBuffer = field(default_factory=ReorderBuffer)
    final_sent: bool = False
    marks: PhaseMarks = field(default_factory=PhaseMarks)

    @property
    def queue_id(self) -> int:
        return self.queue.queue_id

    @property
    def ready(self) -> bool:
        return bool(self.devices)


class SessionState(enum.Enum):
    NEW = "new"
    AWAIT_FINISHED = "await_finished"
    ESTABLISHED = "established"
    CLOSED = "closed"


@dataclass
class ControllerSession:
    """Controller end of one client connection."""

    sid: int
    host: object
    state: SessionState = SessionState.NEW
    handshake: ControllerHandshake | None = None
    key: SessionKey | None = None
    seqs: SeqState = field(default_factory=SeqState)
    plain_seq: int = 0
    task_id: int | None = None


class SecurityController:
    def __init__(self, platform: Platform, identity: DeviceIdentity, measurement: Measurement):
        self.platform = platform
        self.fabric = platform.fabric
        self.clock = platform.clock
        self.devices = platform.devices
        self.costs = platform.costs
        self.identity = identity
        self.measurement = measurement
        self.audit = AuditLog()
        self.metrics: Counter[str] = Counter()
        self.enclaves: dict[int, Enclave] = {}
        self.sessions: dict[int, ControllerSession] = {}
        self.session_log: list[dict] = []
        self._token = self.fabric.claim_management_port()
        self._task_ids = itertools.count(1)
        self._queue_ids = itertools.count(1)
        self._req_ids = itertools.count(1)
        self._session_ids = itertools.count(1)
        self._holder: dict[str, int] = {}
        self._host_requests: list[SchedulerRequest] = []
        self._rng = random.Random(platform.rng.getrandbits(64))
        self.wait_for_devices = platform.config.controller.wait_for_devices
        self.accel_type = platform.config.controller.accel_type
        # test hook: rewrites sealed result frames before they leave the controller
        self.result_tamper: Callable[[bytes], bytes] | None = None
        for name in sorted(self.devices):
            dev = self.fabric.endpoint(name)
            self.fabric.configure_route(self._token, dev, self.platform.host, World.INSECURE)

    # -- boot --------------------------------------------------------------

    @classmethod
    def boot(
        cls,
        platform: Platform,
        firmware: bytes,
        firmware_sig: bytes,
        system_sw: bytes,
        system_sw_sig: bytes,
        identity: DeviceIdentity,
        vendor_pubkey: bytes,
    ) -> "SecurityController":
        if not verify_image(vendor_pubkey, firmware, firmware_sig):
            raise BootSignatureInvalid("firmware signature invalid")
        if not verify_image(vendor_pubkey, system_sw, system_sw_sig):
            raise BootSignatureInvalid("system software signature invalid")
        return cls(platform, identity, measure_boot(firmware, system_sw))

    @classmethod
    def boot_bundle(cls, platform: Platform, bundle: BootBundle) -> "SecurityController":
        return cls.boot(
            platform,
            bundle.firmware,
            bundle.firmware_sig,
            bundle.system_sw,
            bundle.system_sw_sig,
            bundle.identity,
            bundle.vendor_pubkey,
        )

    # -- channels ------------------------------------------------------------

    def open_channel(self, host_ep) -> ControllerSession:
        session = ControllerSession(next(self._session_ids), self.fabric.endpoint(host_ep.id))
        self.sessions[session.sid] = session
        return session

    def close_channel(self, session: ControllerSession) -> None:
        """Connection gone. Half-finished handshakes leave nothing behind."""
        if session.state is not SessionState.ESTABLISHED:
            session.handshake = None
            session.key = None
        session.state = SessionState.CLOSED
        self.sessions.pop(session.sid, None)

    def _plain_reply(self, session: ControllerSession, subtag: int, payload: bytes = b"") -> bytes:
        frame = frame_plain(bytes([subtag]) + payload, session.plain_seq)
        session.plain_seq += 1
        return serialize_envelope(frame)

    def _sealed_reply(self, session: ControllerSession, body: ControlBody) -> bytes:
        env = seal_task(
            body,
            session.key.key,
            0,
            session.seqs.next_out,
            TaskType.CONFIGURATION,
            direction=CONTROLLER_TO_HOST,
            nonce_log=self.platform.nonce_log,
        )
        session.seqs.next_out += 1
        return serialize_envelope(env)

    def handle_control_frame(self, session: ControllerSession, raw: bytes) -> list[bytes]:
        """Handshake, configuration and out-of-band frames (task id 0)."""
        try:
            env = parse_envelope(raw)
        except ParseError:
            self.metrics["dropped_frames"] += 1
            return []
        if env.task_id != 0:
            self.metrics["dropped_frames"] += 1
            return []
        if env.nonce == PLAIN_NONCE:
            return self._handle_plain(session, env)
        return self._handle_sealed_control(session, env)

    def _handle_plain(self, session: ControllerSession, env: TaskEnvelope) -> list[bytes]:
        try:
            body = unframe_plain(env)
        except ProtocolError:
            self.metrics["dropped_frames"] += 1
            return []
        if not body:
            self.metrics["dropped_frames"] += 1
            return []
        subtag, payload = body[0], body[1:]
        if subtag == OOB_RELEASE:
            try:
                count = int(json.loads(payload.decode())["count"])
            except (ValueError, KeyError, TypeError, UnicodeDecodeError):
                self.metrics["dropped_frames"] += 1
                return []
            granted = self.request_host_release(session.host, count)
            return [self._plain_reply(session, OOB_RELEASE_REPLY, json.dumps({"granted": granted}).encode())]
        if subtag == HS_HELLO and session.state is SessionState.NEW:
            session.handshake = ControllerHandshake(self.identity, self.measurement, self._rng)
            try:
                quote = session.handshake.on_hello(payload)
            except HandshakeError:
                session.handshake = None
                self.metrics["dropped_frames"] += 1
                return []
            session.state = SessionState.AWAIT_FINISHED
            return [self._plain_reply(session, HS_QUOTE, quote)]
        if subtag == HS_FINISHED and session.state is SessionState.AWAIT_FINISHED:
            try:
                session.key = session.handshake.on_finished(payload)
            except (ConfirmationFailed, HandshakeError):
                session.handshake = None
                session.state = SessionState.NEW
                self.metrics["handshake_failures"] += 1
                self.session_log.append({"sid": session.sid, "established": False})
                return [self._plain_reply(session, HS_NACK)]
            session.state = SessionState.ESTABLISHED
            session.handshake = None
            self.session_log.append(
                {"sid": session.sid, "established": True, "measurement": self.measurement.digest.hex()}
            )
            return [self._plain_reply(session, HS_ACK)]
        self.metrics["dropped_frames"] += 1
        return []

    def _handle_sealed_control(self, session: ControllerSession, env: TaskEnvelope) -> list[bytes]:
        if session.state is not SessionState.ESTABLISHED or env.task_type is not TaskType.CONFIGURATION:
            self.metrics["dropped_frames"] += 1
            return []
        try:
            body = open_task(env, session.key.key, session.seqs.next_in, direction=HOST_TO_CONTROLLER)
        except ProtocolError:
            self.metrics["dropped_frames"] += 1
            return []
        session.seqs.next_in += 1
        if isinstance(body, ConfigBody):
            if session.task_id is not None:
                reply = ControlBody("error", {"reason": "QueueExists"})
            else:
                try:
                    self.handle_configuration_task(body, session)
                    reply = self._status(session.task_id)
                except ResourceExhausted:
                    reply = ControlBody("error", {"reason": "ResourceExhausted"})
        elif isinstance(body, ControlBody) and body.op == "status" and session.task_id is not None:
            reply = self._status(session.task_id)
        elif isinstance(body, ControlBody) and body.op == "close" and session.task_id is not None:
            self.close_task(session.task_id)
            reply = ControlBody("closed", {"task_id": session.task_id})
        else:
            reply = ControlBody("error", {"reason": "UnexpectedMessage"})
        return [self._sealed_reply(session, reply)]

    def _status(self, task_id: int) -> ControlBody:
        enc = self.enclaves[task_id]
        return ControlBody(
            "ready" if enc.ready else "waiting",
            {"task_id": task_id, "queue_id": enc.queue_id, "devices": len(enc.devices)},
        )

    # -- task manager --------------------------------------------------------

    def handle_configuration_task(self, body: ConfigBody, session: ControllerSession) -> tuple[int, int]:
        if session.key is None:
            raise ControllerError("configuration before attestation")
        task_id = next(self._task_ids)
        queue_id = next(self._queue_ids)
        self.fabric.register_queue(self._token, queue_id)
        self.fabric.map_queue_window(self._token, queue_id, session.host)
        queue = TaskQueue(queue_id, task_id, session.key.key, session.seqs, nonce_log=self.platform.nonce_log)
        enclave = Enclave(task_id, queue, session, body.priority, body.count, next(self._req_ids))
        self.enclaves[task_id] = enclave
        session.task_id = task_id
        self.audit.record(self.clock.now, EventKind.QUEUE_CREATED, task_id=task_id, queue_id=queue_id)
        self.reschedule()
        if not enclave.ready and not self.wait_for_devices:
            self._destroy(enclave)
            session.task_id = None
            raise ResourceExhausted(f"no device free for task {task_id}")
        return queue_id, task_id

    def enclave(self, task_id: int) -> Enclave:
        try:
            return self.enclaves[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def handle_command_task(self, enclave: Enclave, body: CommandBody) -> None:
        if enclave.status is EnclaveStatus.CLOSED:
            raise EnclaveNotRunning(f"task {enclave.task_id} is closed")
        if enclave.status is not EnclaveStatus.AWAITING_COMMAND:
            raise CommandAlreadyActive(f"task {enclave.task_id} already runs a program")
        body.program.validate()
        enclave.program = body.program
        enclave.status = EnclaveStatus.RUNNING
        for name in enclave.devices:
            self.devices[name].free_at = max(self.devices[name].free_at, self.clock.now)

    def handle_data_task(self, enclave: Enclave, body: DataBody) -> None:
        if enclave.status is not EnclaveStatus.RUNNING:
            raise EnclaveNotRunning(f"task {enclave.task_id} is {enclave.status.value}")
        enclave.input_buffer.extend(body.payload)
        if body.final:
            enclave.status = EnclaveStatus.DRAINING

    def process(self) -> None:
        """Doorbell: drain every queue, run programs, emit results."""
        for task_id in sorted(self.enclaves):
            enclave = self.enclaves[task_id]
            if enclave.status is EnclaveStatus.CLOSED:
                continue
            frames = self.fabric.controller_take(self._token, enclave.queue_id)
            if not frames and not enclave.input_buffer and not enclave.output_buffer and not self._needs_final(enclave):
                continue
            marks = enclave.marks
            marks.received = self.clock.now
            for raw in frames:
                self._dispatch_frame(enclave, raw)
            marks.processed = marks.task_copied = marks.computed = marks.result_copied = self.clock.now
            self._run_program(enclave)
            self.emit_results(enclave)
            self._finish_drain(enclave)
            marks.emitted = self.clock.now

    def _dispatch_frame(self, enclave: Enclave, raw: bytes) -> None:
        self.clock.advance(self.costs.parse_ns())
        try:
            env = parse_envelope(raw)
        except ParseError:
            self.metrics["dropped_frames"] += 1
            return
        self.clock.advance(self.costs.crypto_ns(len(env.ciphertext)))
        try:
            body = enclave.queue.accept(env)
        except ProtocolError:
            self.metrics["dropped_frames"] += 1
            return
        try:
            if isinstance(body, CommandBody):
                self.handle_command_task(enclave, body)
            elif isinstance(body, DataBody):
                self.handle_data_task(enclave, body)
            elif isinstance(body, ControlBody) and body.op == "close":
                self.close_task(enclave.task_id)
            else:
                self.metrics["rejected_tasks"] += 1
        except (ControllerError, ProgramInvalid) as exc:
            logger.info("task %d: rejected %s", enclave.task_id, exc)
            self.metrics["rejected_tasks"] += 1

    def _take_units(self, enclave: Enclave) -> list[tuple[int, bytes]]:
        size = enclave.program.kernel.in_bytes
        units = []
        buf = enclave.input_buffer
        while len(buf) >= size:
            units.append((enclave.next_chunk, bytes(buf[:size])))
            del buf[:size]
            enclave.next_chunk += 1
        return units

    def _run_program(self, enclave: Enclave) -> None:
        if enclave.program is None or not enclave.devices or enclave.status is EnclaveStatus.CLOSED:
            return
        units = self._take_units(enclave)
        marks = enclave.marks
        for _, chunk in units:
            self.clock.advance(self.costs.internal_copy_ns(len(chunk)))
        marks.task_copied = self.clock.now
        outputs: list[bytes] = []
        done = fan_out(
            self.platform, enclave.devices, self.fabric.controller_id, units,
            enclave.program.kernel, enclave.task_id, self.clock.now,
        )
        for index, output in done:
            outputs.extend(enclave.reorder.push(index, output))
        marks.computed = self.clock.now
        for out in outputs:
            self.clock.advance(self.costs.internal_copy_ns(len(out)))
            enclave.output_buffer.append(out)
        marks.result_copied = self.clock.now

    def emit_results(self, enclave: Enclave) -> list[TaskEnvelope]:
        sent = []
        while enclave.output_buffer:
            out = enclave.output_buffer.popleft()
            pieces = [out[i : i + MAX_PAYLOAD] for i in range(0, len(out), MAX_PAYLOAD)] or [b""]
            for piece in pieces:
                sent.append(self._send_result(enclave, ResultBody(piece)))
        return sent

    def _send_result(self, enclave: Enclave, body: ResultBody) -> TaskEnvelope:
        self.clock.advance(self.costs.crypto_ns(len(body.payload) + 1))
        env = enclave.queue.emit(body)
        frame = serialize_envelope(env)
        if self.result_tamper is not None:
            frame = self.result_tamper(frame)
        self.fabric.dma_transfer(self.fabric.controller_id, enclave.session.host, len(frame))
        self.fabric.controller_post(self._token, enclave.queue_id, frame)
        return env

    def _needs_final(self, enclave: Enclave) -> bool:
        return enclave.status is EnclaveStatus.DRAINING and not enclave.final_sent

    def _finish_drain(self, enclave: Enclave) -> None:
        if not self._needs_final(enclave) or enclave.output_buffer or enclave.reorder.waiting:
            return
        size = enclave.program.kernel.in_bytes if enclave.program else 1
        if len(enclave.input_buffer) >= size:
            return  # still has work, waiting for devices
        if enclave.input_buffer:
            self.metrics["truncated_input_bytes"] += len(enclave.input_buffer)
            enclave.input_buffer.clear()
        self._send_result(enclave, ResultBody(b"", final=True))
        enclave.final_sent = True
        self._release_devices(enclave, reason="drained")
        self.reschedule()

    def close_task(self, task_id: int) -> None:
        enclave = self.enclave(task_id)
        if enclave.status is EnclaveStatus.CLOSED:
            return
        self._destroy(enclave)
        self.reschedule()

    def _destroy(self, enclave: Enclave) -> None:
        self._release_devices(enclave, reason="closed")
        self.fabric.destroy_queue(self._token, enclave.queue_id)
        enclave.status = EnclaveStatus.CLOSED
        enclave.input_buffer.clear()
        enclave.output_buffer.clear()
        self.audit.record(self.clock.now, EventKind.QUEUE_DESTROYED, task_id=enclave.task_id, queue_id=enclave.queue_id)

    def read_buffer(self, task_id: int, accessor_task_id: int, which: str = "output") -> bytes:
        """The only path into an enclave's buffers; keyed and checked by task id."""
        if accessor_task_id != task_id:
            self.metrics["denied_buffer_reads"] += 1
            raise AccessDenied(f"task {accessor_task_id} may not touch buffers of task {task_id}")
        enclave = self.enclave(task_id)
        if which == "input":
            return bytes(enclave.input_buffer)
        if which == "output":
            return b"".join(enclave.output_buffer)
        raise ValueError(f"unknown buffer {which!r}")

    # -- world switching -------------------------------------------------------

    def _cleanup(self, name: str, start_ns: int, *, advance: bool = True, **detail) -> int:
        """Reset ``name`` to a trusted state on its own timeline.

        With ``advance`` the controller waits for it (a route change follows);
        otherwise only the device is occupied until the cleanup ends.
        """
        report = self.devices[name].reset_to_trusted_state(start_ns=start_ns)
        self.audit.record(
            report.end_ns,
            EventKind.CLEANUP,
            device=name,
            method=str(report.method),
            elapsed_ns=report.elapsed_ns,
            residual=sorted(r.value for r in report.residual),
            **detail,
        )
        if advance:
            self.clock.advance_to(report.end_ns)
        return report.end_ns

    def switch_world(self, name: str, target: World, reason: str, *, owner=None, start_ns: int | None = None) -> int:
        """Cleanup, then re-route. Returns the virtual time of the switch."""
        dev = self.devices[name]
        ep = self.fabric.endpoint(name)
        if dev.in_flight is not None:
            if reason != "preemption":
                raise DeviceBusy(f"{name} is mid-kernel")
            dev.halt()
        if owner is None:
            owner = self.fabric.controller_id if target is World.SECURE else self.platform.host
        old = self.fabric.table.world(ep)
        t = self._cleanup(name, self.clock.now if start_ns is None else start_ns, reason=reason)
        self.fabric.configure_route(self._token, ep, owner, target)
        self.audit.record(
            t,
            EventKind.WORLD_SWITCH,
            device=name,
            old=old.value if old else None,
            new=target.value,
            reason=reason,
        )
        return t

    def _task_switch(self, name: str, to_task: int | None, start_ns: int, reason: str) -> None:
        from_task = self._holder.get(name)
        t = self._cleanup(name, start_ns, advance=False, reason=reason)
        self.audit.record(t, EventKind.TASK_SWITCH, device=name, task_id=to_task, old_task=from_task, reason=reason)

    def _release_devices(self, enclave: Enclave, reason: str) -> None:
        start = self.clock.now
        for name in sorted(enclave.devices):
            self._cleanup(name, start, advance=False, reason=reason, old_task=enclave.task_id)
            self._holder.pop(name, None)
        enclave.devices.clear()

    # -- scheduling ------------------------------------------------------------

    def pool_snapshot(self) -> list[DeviceSlot]:
        slots = []
        for name in sorted(self.devices):
            world = self.fabric.table.world(self.fabric.endpoint(name))
            if world is World.SECURE:
                holder = self._holder.get(name)
                if holder is None:
                    slots.append(DeviceSlot(name, DeviceState.SECURE_FREE))
                else:
                    slots.append(DeviceSlot(name, DeviceState.HELD, holder, self.enclaves[holder].priority))
            else:
                busy = self.devices[name].in_flight is not None
                slots.append(DeviceSlot(name, DeviceState.INSECURE_BUSY if busy else DeviceState.INSECURE_IDLE))
        return slots

    def pending_requests(self) -> list[SchedulerRequest]:
        reqs = []
        for enc in self.enclaves.values():
            if enc.status is EnclaveStatus.CLOSED or enc.final_sent:
                continue
            need = enc.demand - len(enc.devices)
            if need > 0:
                reqs.append(SchedulerRequest(enc.req_id, Origin.SECURE_ENCLAVE, enc.priority, need, enc.task_id))
        return reqs + list(self._host_requests)

    def reschedule(self):
        pending = self.pending_requests()
        result = schedule(self.pool_snapshot(), pending)
        self._host_requests.clear()
        start = self.clock.now
        for d in result.decisions:
            if d.action is Action.RELEASE_TO_HOST:
                req = next(r for r in pending if r.req_id == d.req_id)
                owner = self.fabric.endpoint(req.host) if req.host else self.platform.host
                self.switch_world(d.device, World.INSECURE, "host_request", owner=owner, start_ns=start)
                continue
            enclave = self.enclaves[d.task_id]
            if d.action is Action.GRANT_FREE:
                self._task_switch(d.device, d.task_id, start, "allocate")
            elif d.action is Action.CLAIM_IDLE:
                self.switch_world(d.device, World.SECURE, "allocate", start_ns=start)
            elif d.action is Action.PREEMPT_INSECURE:
                halted = self.devices[d.device].in_flight
                self.audit.record(start, EventKind.PREEMPTION, device=d.device, task_id=d.task_id, victim="host", halted=halted)
                self.switch_world(d.device, World.SECURE, "preemption", start_ns=start)
            elif d.action is Action.PREEMPT_SECURE:
                victim = self.enclaves[d.victim]
                self.audit.record(start, EventKind.PREEMPTION, device=d.device, task_id=d.task_id, victim=d.victim)
                victim.devices.remove(d.device)
                self._task_switch(d.device, d.task_id, start, "preemption")
            self._holder[d.device] = d.task_id
            enclave.devices.append(d.device)
        return result

    def request_host_release(self, host_ep, count: int) -> int:
        """Out-of-band, unauthenticated best-effort request from a host."""
        if count <= 0:
            return 0
        req = SchedulerRequest(next(self._req_ids), Origin.HOST_INSECURE, Priority.BEST_EFFORT, count, host=host_ep.id)
        self._host_requests.append(req)
        result = self.reschedule()
        return result.granted.get(req.req_id, 0)

    def export_audit(self) -> str:
        return self.audit.to_jsonl()
