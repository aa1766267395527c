"""Host-side client library.

The producer loop a data owner runs against the controller: attest, ask for
a task queue, send one command task and a stream of data tasks, collect the
sealed results. Also the unprotected direct path used as the baseline.

Transport is abstracted as a :class:`Channel`; :class:`LocalChannel` talks
to an in-process controller through the fabric, ``transport.SocketChannel``
to a controller service over TCP.
"""

from __future__ import annotations

import enum
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Protocol

from .accel import ShapeMismatch, run_kernel
from .attest import ClientHandshake
from .clock import VirtualClock
from .config import CostModel
from .controller import (
    HS_ACK,
    HS_FINISHED,
    HS_HELLO,
    HS_NACK,
    HS_QUOTE,
    MAX_PAYLOAD,
    OOB_RELEASE,
    OOB_RELEASE_REPLY,
    ControllerSession,
    SecurityController,
)
from .errors import (
    AuthFailure,
    DevicesUnavailable,
    HandshakeError,
    HostError,
    ParseError,
    ProtocolError,
    ResultGap,
    SequenceViolation,
    Timeout,
)
from .fabric import EndpointId
from .program import TaskProgram
from .protocol import (
    CONTROLLER_TO_HOST,
    HOST_TO_CONTROLLER,
    CommandBody,
    ConfigBody,
    ControlBody,
    DataBody,
    NonceLog,
    Priority,
    ResultBody,
    TaskType,
    frame_plain,
    open_raw,
    decode_body,
    parse_envelope,
    seal_task,
    serialize_envelope,
    unframe_plain,
)
from .sim import Platform, fan_out

logger = logging.getLogger(__name__)


class Channel(Protocol):
    """How a host reaches the controller.

    ``control`` carries task-id-0 frames (handshake, configuration,
    out-of-band) and returns the replies; ``push`` writes one frame into a
    mapped queue window; ``doorbell`` lets the controller run and returns
    whatever it posted back.
    """

    def control(self, frame: bytes) -> list[bytes]: ...

    def push(self, queue_id: int, frame: bytes) -> None: ...

    def doorbell(self, queue_id: int) -> list[bytes]: ...

    def close(self) -> None: ...


class LocalChannel:
    """In-process channel. Frames cross the fabric and pay its DMA costs.

    ``drop_after`` simulates a link that dies after that many control
    frames: the next one raises :class:`Timeout` and the controller sees the
    connection close.
    """

    def __init__(self, controller: SecurityController, host_ep: EndpointId | None = None, *, drop_after: int | None = None):
        self.controller = controller
        self.fabric = controller.fabric
        self.host = host_ep or controller.platform.host
        self.session: ControllerSession = controller.open_channel(self.host)
        self.drop_after = drop_after
        self.sent = 0
        self.closed = False

    @property
    def clock(self) -> VirtualClock:
        return self.controller.clock

    def _check_link(self) -> None:
        if self.closed:
            raise Timeout("channel closed")
        if self.drop_after is not None and self.sent >= self.drop_after:
            self.close()
            raise Timeout("link dropped")
        self.sent += 1

    def control(self, frame: bytes) -> list[bytes]:
        self._check_link()
        self.fabric.dma_transfer(self.host, self.fabric.controller_id, len(frame))
        replies = self.controller.handle_control_frame(self.session, frame)
        for r in replies:
            self.fabric.dma_transfer(self.fabric.controller_id, self.host, len(r))
        return replies

    def push(self, queue_id: int, frame: bytes) -> None:
        if self.closed:
            raise Timeout("channel closed")
        self.fabric.dma_transfer(self.host, self.fabric.controller_id, len(frame))
        self.fabric.window_write(self.host, queue_id, frame)

    def doorbell(self, queue_id: int) -> list[bytes]:
        if self.closed:
            raise Timeout("channel closed")
        self.controller.process()
        return self.fabric.window_read(self.host, queue_id)

    def phase_marks(self, task_id: int):
        enclave = self.controller.enclaves.get(task_id)
        return enclave.marks if enclave is not None else None

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.controller.close_channel(self.session)


def _plain_exchange(channel: Channel, seq: int, subtag: int, payload: bytes) -> tuple[int, bytes]:
    frame = serialize_envelope(frame_plain(bytes([subtag]) + payload, seq))
    replies = channel.control(frame)
    if len(replies) != 1:
        raise HandshakeError(f"expected one reply, got {len(replies)}")
    try:
        body = unframe_plain(parse_envelope(replies[0]))
    except ProtocolError as exc:
        raise HandshakeError(f"bad handshake reply: {exc}") from None
    if not body:
        raise HandshakeError("empty handshake reply")
    return body[0], body[1:]


@dataclass
class ClientSession:
    """A live, attested connection with its task queue."""

    key: bytes = field(repr=False)
    channel: Channel
    task_id: int
    queue_id: int
    expected_measurement: bytes
    transcript_hash: bytes
    clock: VirtualClock
    costs: CostModel
    send_seq: int = 0
    recv_seq: int = 0
    ready: bool = False
    devices: int = 0
    nonce_log: NonceLog | None = None

    def seal(self, body, task_type: TaskType, *, task_id: int | None = None) -> bytes:
        env = seal_task(
            body,
            self.key,
            self.task_id if task_id is None else task_id,
            self.send_seq,
            task_type,
            direction=HOST_TO_CONTROLLER,
            nonce_log=self.nonce_log,
        )
        self.send_seq += 1
        return serialize_envelope(env)

    def control(self, body) -> ControlBody:
        """Send a sealed task-id-0 message and open the single reply."""
        replies = self.channel.control(self.seal(body, TaskType.CONFIGURATION, task_id=0))
        if len(replies) != 1:
            raise HostError(f"expected one control reply, got {len(replies)}")
        env = parse_envelope(replies[0])
        reply = decode_body(env.task_type, open_raw(env, self.key, self.recv_seq, direction=CONTROLLER_TO_HOST))
        self.recv_seq += 1
        if not isinstance(reply, ControlBody):
            raise HostError(f"unexpected control reply {reply!r}")
        return reply

    def refresh(self) -> bool:
        reply = self.control(ControlBody("status"))
        self.ready = reply.op == "ready"
        self.devices = int(reply.fields.get("devices", 0))
        return self.ready

    def close(self) -> None:
        try:
            self.control(ControlBody("close"))
        finally:
            self.channel.close()


def attest_and_connect(
    channel: Channel,
    device_pubkey: bytes,
    expected_measurement: bytes,
    request: ConfigBody | None = None,
    *,
    rng: random.Random | None = None,
    clock: VirtualClock | None = None,
    costs: CostModel | None = None,
    nonce_log: NonceLog | None = None,
) -> ClientSession:
    """Attest the controller, agree on a key and open a task queue.

    Nothing is kept if any step fails: the channel is closed and the error
    propagates.
    """
    request = request or ConfigBody("gpu", 1)
    clock = clock or getattr(channel, "clock", None) or VirtualClock()
    costs = costs or CostModel()
    hs = ClientHandshake(device_pubkey, expected_measurement, rng)
    try:
        tag, payload = _plain_exchange(channel, 0, HS_HELLO, hs.hello())
        if tag != HS_QUOTE:
            raise HandshakeError(f"expected quote, got sub-tag {tag}")
        finished = hs.on_quote(payload)
        tag, _ = _plain_exchange(channel, 1, HS_FINISHED, finished)
        if tag not in (HS_ACK, HS_NACK):
            raise HandshakeError(f"expected ack, got sub-tag {tag}")
        key = hs.on_ack(tag == HS_ACK)
        session = ClientSession(
            key.key,
            channel,
            task_id=0,
            queue_id=0,
            expected_measurement=expected_measurement,
            transcript_hash=key.transcript_hash,
            clock=clock,
            costs=costs,
            nonce_log=nonce_log,
        )
        reply = session.control(request)
    except Exception:
        channel.close()
        raise
    if reply.op == "error":
        channel.close()
        raise HostError(f"configuration refused: {reply.fields.get('reason')}")
    session.task_id = int(reply.fields["task_id"])
    session.queue_id = int(reply.fields["queue_id"])
    session.devices = int(reply.fields.get("devices", 0))
    session.ready = reply.op == "ready"
    return session


def send_release(channel: Channel, count: int, *, seq: int = 0) -> int:
    """Out-of-band request asking the controller to hand devices back."""
    tag, payload = _plain_exchange(channel, seq, OOB_RELEASE, json.dumps({"count": count}).encode())
    if tag != OOB_RELEASE_REPLY:
        raise HandshakeError(f"expected release reply, got sub-tag {tag}")
    return int(json.loads(payload.decode())["granted"])


# -- workloads --------------------------------------------------------------


class Mode(enum.Enum):
    HETEE = "hetee"
    BASELINE = "baseline"


@dataclass
class WorkloadSpec:
    program: TaskProgram
    inputs: list[bytes]
    mode: Mode = Mode.HETEE
    demand: int = 1
    priority: Priority = Priority.NORMAL

    def __post_init__(self):
        self.program.validate()
        size = self.program.kernel.in_bytes
        for i, chunk in enumerate(self.inputs):
            if len(chunk) != size:
                raise ShapeMismatch(f"input {i} has {len(chunk)} bytes, kernel takes {size}")


@dataclass
class WorkloadResult:
    outputs: list[bytes | None]
    timestamps: dict[str, int] = field(default_factory=dict)
    errors: list[Exception] = field(default_factory=list)
    results_received: int = 0

    @property
    def elapsed_ns(self) -> int:
        return self.timestamps["done"] - self.timestamps["start"]


def _pieces(data: bytes) -> list[bytes]:
    return [data[i : i + MAX_PAYLOAD] for i in range(0, len(data), MAX_PAYLOAD)] or [b""]


def submit_workload(session: ClientSession, spec: WorkloadSpec, *, strict: bool = True, max_idle: int = 3) -> WorkloadResult:
    """Run ``spec`` through the session's queue and return outputs in input order.

    A result that fails authentication is excluded (its slot stays ``None``)
    and the error recorded; with ``strict`` the first such error is raised
    once the stream has drained.
    """
    clock, costs, channel = session.clock, session.costs, session.channel
    kernel = spec.program.kernel
    ts = {"start": clock.now}
    clock.advance(costs.preprocess_ns())
    ts["preprocessed"] = clock.now

    bodies = [(CommandBody(spec.program), TaskType.COMMAND)]
    for chunk in spec.inputs:
        bodies += [(DataBody(p), TaskType.DATA) for p in _pieces(chunk)]
    bodies.append((DataBody(b"", final=True), TaskType.DATA))
    for body, ttype in bodies:
        clock.advance(costs.crypto_ns(len(body.encode())))
        channel.push(session.queue_id, session.seal(body, ttype))
    ts["sent"] = clock.now

    per_output = len(_pieces(bytes(kernel.out_bytes)))
    first_result_seq = session.recv_seq
    received: dict[int, bytes] = {}
    result = WorkloadResult(outputs=[])
    finished = False
    idle = 0
    while not finished:
        frames = channel.doorbell(session.queue_id)
        if not frames:
            idle += 1
            if idle >= max_idle:
                raise Timeout(f"task {session.task_id}: no results after {idle} doorbells")
            continue
        idle = 0
        for raw in frames:
            try:
                env = parse_envelope(raw)
            except ParseError as exc:
                result.errors.append(exc)
                continue
            if env.seq > session.recv_seq:
                raise ResultGap(session.recv_seq, env.seq)
            clock.advance(costs.crypto_ns(len(env.ciphertext)))
            try:
                if env.task_type is not TaskType.RESULT or env.task_id != session.task_id:
                    raise AuthFailure(f"unexpected {env.task_type.name} frame for task {env.task_id}")
                body = decode_body(env.task_type, open_raw(env, session.key, session.recv_seq, direction=CONTROLLER_TO_HOST))
            except SequenceViolation as exc:  # replayed / stale frame
                result.errors.append(exc)
                continue
            except ProtocolError as exc:
                logger.warning("task %d: result seq %d rejected: %s", session.task_id, env.seq, exc)
                result.errors.append(exc)
                session.recv_seq += 1
                continue
            index = session.recv_seq - first_result_seq
            session.recv_seq += 1
            assert isinstance(body, ResultBody)
            if body.final:
                finished = True
                break
            received[index] = body.payload
    ts["done"] = clock.now
    marks = getattr(channel, "phase_marks", lambda _t: None)(session.task_id)
    if marks is not None:
        ts.update(
            processed=marks.processed,
            task_copied=marks.task_copied,
            computed=marks.computed,
            result_copied=marks.result_copied,
        )

    total = len(received) + sum(1 for e in result.errors if isinstance(e, AuthFailure))
    if total != len(spec.inputs) * per_output:
        raise ResultGap(first_result_seq + len(spec.inputs) * per_output, first_result_seq + total)
    for i in range(len(spec.inputs)):
        parts = [received.get(i * per_output + j) for j in range(per_output)]
        result.outputs.append(None if any(p is None for p in parts) else b"".join(parts))
    result.results_received = len(received)
    result.timestamps = ts
    if strict and result.errors:
        raise result.errors[0]
    return result


def run_direct_insecure(
    platform: Platform,
    host_ep: EndpointId,
    demand: int,
    spec: WorkloadSpec,
    *,
    channel: Channel | None = None,
) -> WorkloadResult:
    """Baseline: host drives its own insecure devices directly.

    No sealing, no controller hop, no cleanup between chunks. If the host
    owns too few idle devices and a ``channel`` is given, an out-of-band
    release request is sent first.
    """
    fabric = platform.fabric
    if demand < 1:
        raise ValueError("demand must be >= 1")

    def idle_owned() -> list[str]:
        return [ep.id for ep in fabric.enumerate(host_ep) if platform.devices[ep.id].in_flight is None]

    names = idle_owned()
    if len(names) < demand and channel is not None:
        send_release(channel, demand - len(names))
        names = idle_owned()
    if len(names) < demand:
        raise DevicesUnavailable(f"{host_ep} has {len(names)} idle devices, needs {demand}")
    names = names[:demand]

    clock = platform.clock
    ts = {"start": clock.now}
    clock.advance(platform.costs.preprocess_ns())
    ts["preprocessed"] = ts["sent"] = ts["processed"] = ts["task_copied"] = clock.now
    units = list(enumerate(spec.inputs))
    done = fan_out(platform, names, host_ep, units, spec.program.kernel, 0, clock.now)
    ts["computed"] = ts["result_copied"] = ts["done"] = clock.now
    ordered = dict(done)
    return WorkloadResult([ordered[i] for i in range(len(units))], ts, results_received=len(units))


def local_outputs(spec: WorkloadSpec) -> list[bytes]:
    """Reference outputs computed on the host with no device model at all."""
    return [run_kernel(spec.program.kernel, chunk) for chunk in spec.inputs]
