"""Task envelope wire format and AEAD sealing.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic "HTEE"
    4       1     version (1)
    5       1     task type (0 config, 1 command, 2 data, 3 result)
    6       2     reserved (0)
    8       8     task id
    16      8     sequence number
    24      12    nonce
    36      4     ciphertext length
    40      n     ciphertext
    40+n    16    tag

Associated data is bytes 0..24 followed by the ciphertext length (28 bytes).
The nonce is ``direction || 000 || seq`` where direction is 0 for
host->controller and 1 for controller->host, so a (key, nonce) pair can only
repeat if a sender reuses a sequence number.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthFailure,
    BadMagic,
    BadVersion,
    LengthMismatch,
    MalformedBody,
    ParseError,
    ProtocolError,
    SequenceViolation,
    Truncated,
)
from .program import TaskProgram

MAGIC = b"HTEE"
VERSION = 1
PREFIX = struct.Struct("<4sBBHQQ")  # magic .. seq
HEADER_LEN = 40
TAG_LEN = 16
NONCE_LEN = 12
KEY_LEN = 32
MAX_BODY = 16 * 1024 * 1024

HOST_TO_CONTROLLER = 0
CONTROLLER_TO_HOST = 1


class TaskType(enum.IntEnum):
    CONFIGURATION = 0
    COMMAND = 1
    DATA = 2
    RESULT = 3


class Priority(enum.Enum):
    HIGH = "High"
    NORMAL = "Normal"
    BEST_EFFORT = "BestEffort"


@dataclass(frozen=True)
class TaskEnvelope:
    task_type: TaskType
    task_id: int
    seq: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes
    version: int = VERSION
    magic: bytes = MAGIC
    reserved: int = 0

    def __post_init__(self):
        if len(self.nonce) != NONCE_LEN:
            raise ValueError("nonce must be 12 bytes")
        if len(self.tag) != TAG_LEN:
            raise ValueError("tag must be 16 bytes")
        if len(self.ciphertext) > MAX_BODY:
            raise ValueError("ciphertext exceeds 16 MiB")

    @property
    def associated_data(self) -> bytes:
        return _aad(self.task_type, self.task_id, self.seq, len(self.ciphertext), self.version, self.magic, self.reserved)


def _aad(task_type, task_id, seq, ct_len, version=VERSION, magic=MAGIC, reserved=0) -> bytes:
    return PREFIX.pack(magic, version, int(task_type), reserved, task_id, seq) + struct.pack("<I", ct_len)


def serialize_envelope(e: TaskEnvelope) -> bytes:
    return b"".join(
        (
            PREFIX.pack(e.magic, e.version, int(e.task_type), e.reserved, e.task_id, e.seq),
            e.nonce,
            struct.pack("<I", len(e.ciphertext)),
            e.ciphertext,
            e.tag,
        )
    )


def parse_envelope(data: bytes) -> TaskEnvelope:
    data = bytes(data)
    if len(data) < HEADER_LEN:
        raise Truncated(f"{len(data)} bytes is shorter than the 40-byte header")
    magic, version, ttype, reserved, task_id, seq = PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(repr(magic))
    if version != VERSION:
        raise BadVersion(str(version))
    if reserved != 0:
        raise ParseError("reserved field must be zero")
    try:
        task_type = TaskType(ttype)
    except ValueError:
        raise ParseError(f"unknown task type {ttype}") from None
    (ct_len,) = struct.unpack_from("<I", data, 36)
    if ct_len > MAX_BODY:
        raise LengthMismatch(f"ciphertext length {ct_len} exceeds 16 MiB")
    end = HEADER_LEN + ct_len + TAG_LEN
    if end > len(data):
        raise Truncated(f"frame declares {end} bytes, {len(data)} present")
    if end < len(data):
        raise LengthMismatch(f"{len(data) - end} trailing bytes after tag")
    return TaskEnvelope(
        task_type=task_type,
        task_id=task_id,
        seq=seq,
        nonce=data[24:36],
        ciphertext=data[HEADER_LEN : HEADER_LEN + ct_len],
        tag=data[HEADER_LEN + ct_len : end],
    )


def make_nonce(direction: int, seq: int) -> bytes:
    return bytes([direction]) + b"\x00\x00\x00" + seq.to_bytes(8, "little")


def default_direction(task_type: TaskType) -> int:
    return CONTROLLER_TO_HOST if task_type is TaskType.RESULT else HOST_TO_CONTROLLER


# -- bodies ---------------------------------------------------------------


@dataclass(frozen=True)
class ConfigBody:
    accel_type: str
    count: int
    priority: Priority = Priority.NORMAL

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.priority is Priority.BEST_EFFORT:
            raise ValueError("secure requests are High or Normal")

    def encode(self) -> bytes:
        return _json({"op": "config", "accel_type": self.accel_type, "count": self.count, "priority": self.priority.value})


@dataclass(frozen=True)
class ControlBody:
    """Other configuration-channel messages (status, close, replies)."""

    op: str
    fields: dict[str, Any] = field(default_factory=dict)

    def encode(self) -> bytes:
        return _json({"op": self.op, **self.fields})


@dataclass(frozen=True)
class CommandBody:
    program: TaskProgram

    def encode(self) -> bytes:
        return _json({"program": self.program.to_json()})


@dataclass(frozen=True)
class DataBody:
    payload: bytes
    final: bool = False

    def encode(self) -> bytes:
        return bytes([1 if self.final else 0]) + self.payload


@dataclass(frozen=True)
class ResultBody:
    payload: bytes
    final: bool = False

    def encode(self) -> bytes:
        return bytes([1 if self.final else 0]) + self.payload


Body = Union[ConfigBody, ControlBody, CommandBody, DataBody, ResultBody]


def _json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def decode_body(task_type: TaskType, raw: bytes) -> Body:
    try:
        if task_type in (TaskType.DATA, TaskType.RESULT):
            if not raw or raw[0] not in (0, 1):
                raise ValueError("bad stream flags")
            cls = DataBody if task_type is TaskType.DATA else ResultBody
            return cls(raw[1:], bool(raw[0]))
        obj = json.loads(raw.decode())
        if task_type is TaskType.COMMAND:
            program = TaskProgram.from_json(obj["program"])
            return CommandBody(program)
        op = obj.pop("op")
        if op == "config":
            return ConfigBody(str(obj["accel_type"]), int(obj["count"]), Priority(obj.get("priority", "Normal")))
        return ControlBody(str(op), obj)
    except (ValueError, KeyError, TypeError, AttributeError, UnicodeDecodeError) as exc:
        raise MalformedBody(str(exc)) from None


# -- sealing --------------------------------------------------------------


class NonceReuse(ProtocolError):
    pass


class NonceLog:
    """Run-scoped record of every (key, nonce) pair used for sealing."""

    def __init__(self):
        self._seen: set[tuple[bytes, bytes]] = set()
        self.count = 0

    def record(self, key: bytes, nonce: bytes) -> None:
        ident = (hashlib.sha256(key).digest()[:16], nonce)
        if ident in self._seen:
            raise NonceReuse(nonce.hex())
        self._seen.add(ident)
        self.count += 1


def seal_task(
    body: Body | bytes,
    key: bytes,
    task_id: int,
    seq: int,
    task_type: TaskType,
    *,
    direction: int | None = None,
    nonce_log: NonceLog | None = None,
) -> TaskEnvelope:
    if len(key) != KEY_LEN:
        raise ValueError("session key must be 32 bytes")
    task_type = TaskType(task_type)
    plaintext = body if isinstance(body, (bytes, bytearray)) else body.encode()
    if len(plaintext) > MAX_BODY:
        raise ValueError("body exceeds 16 MiB; chunk it")
    if direction is None:
        direction = default_direction(task_type)
    nonce = make_nonce(direction, seq)
    if nonce_log is not None:
        nonce_log.record(key, nonce)
    aad = _aad(task_type, task_id, seq, len(plaintext))
    sealed = AESGCM(key).encrypt(nonce, bytes(plaintext), aad)
    return TaskEnvelope(task_type, task_id, seq, nonce, sealed[:-TAG_LEN], sealed[-TAG_LEN:])


def open_raw(e: TaskEnvelope, key: bytes, expected_seq: int, *, direction: int | None = None) -> bytes:
    """Check sequencing and authenticity; return the plaintext bytes."""
    if e.seq != expected_seq:
        raise SequenceViolation(expected_seq, e.seq)
    if direction is None:
        direction = default_direction(e.task_type)
    if e.nonce != make_nonce(direction, e.seq):
        raise AuthFailure("nonce does not match direction/sequence")
    try:
        return AESGCM(key).decrypt(e.nonce, e.ciphertext + e.tag, e.associated_data)
    except InvalidTag:
        raise AuthFailure("tag verification failed") from None


def open_task(e: TaskEnvelope, key: bytes, expected_seq: int, *, direction: int | None = None) -> Body:
    return decode_body(e.task_type, open_raw(e, key, expected_seq, direction=direction))


# -- plaintext frames (pre-key handshake) ---------------------------------

# sealed nonces start with direction byte 0 or 1, so this can never collide
PLAIN_NONCE = b"\xff" * NONCE_LEN


def plain_tag(task_type: TaskType, task_id: int, seq: int, body: bytes) -> bytes:
    return hashlib.sha256(_aad(task_type, task_id, seq, len(body)) + PLAIN_NONCE + body).digest()[:TAG_LEN]


def frame_plain(body: bytes, seq: int, task_id: int = 0) -> TaskEnvelope:
    """Configuration envelope carrying a clear body; tag is a plain hash."""
    t = TaskType.CONFIGURATION
    return TaskEnvelope(t, task_id, seq, PLAIN_NONCE, bytes(body), plain_tag(t, task_id, seq, body))


def unframe_plain(e: TaskEnvelope) -> bytes:
    if e.task_type is not TaskType.CONFIGURATION or e.nonce != PLAIN_NONCE:
        raise ParseError("not a plaintext configuration frame")
    if e.tag != plain_tag(e.task_type, e.task_id, e.seq, e.ciphertext):
        raise AuthFailure("plaintext frame checksum mismatch")
    return e.ciphertext


# -- queues ---------------------------------------------------------------


@dataclass
class SeqState:
    """Per-session counters; one per direction."""

    next_in: int = 0
    next_out: int = 0


class TaskQueue:
    """Controller-side view of one queue: a strict FIFO bound to one task id.

    Envelopes must arrive with exactly the next expected sequence number;
    anything else is rejected and nothing is buffered.
    """

    def __init__(self, queue_id: int, task_id: int, key: bytes, seqs: SeqState | None = None, *, nonce_log: NonceLog | None = None):
        self.queue_id = queue_id
        self.task_id = task_id
        self._key = key
        self.seqs = seqs or SeqState()
        self.nonce_log = nonce_log
        self.pending: deque[TaskEnvelope] = deque()
        self.accepted = 0
        self.rejected = 0

    @property
    def next_seq_in(self) -> int:
        return self.seqs.next_in

    @property
    def next_seq_out(self) -> int:
        return self.seqs.next_out

    def accept(self, e: TaskEnvelope) -> Body:
        if e.task_id != self.task_id:
            self.rejected += 1
            raise AuthFailure(f"envelope for task {e.task_id} on queue of task {self.task_id}")
        if e.task_type is TaskType.RESULT:
            self.rejected += 1
            raise MalformedBody("result envelopes only flow to the host")
        try:
            body = open_task(e, self._key, self.seqs.next_in, direction=HOST_TO_CONTROLLER)
        except ProtocolError:
            self.rejected += 1
            raise
        self.seqs.next_in += 1
        self.accepted += 1
        return body

    def emit(self, body: Body | bytes, task_type: TaskType = TaskType.RESULT) -> TaskEnvelope:
        e = seal_task(
            body,
            self._key,
            self.task_id,
            self.seqs.next_out,
            task_type,
            direction=CONTROLLER_TO_HOST,
            nonce_log=self.nonce_log,
        )
        self.seqs.next_out += 1
        return e
