import itertools
import os
import random

import pytest
from Crypto.Cipher import AES
from hypothesis import given, settings
from hypothesis import strategies as st

from hetee_sim.accel import MatMul
from hetee_sim.errors import (
    AuthFailure,
    BadMagic,
    BadVersion,
    LengthMismatch,
    MalformedBody,
    ParseError,
    SequenceViolation,
    Truncated,
)
from hetee_sim.program import TaskProgram
from hetee_sim.protocol import (
    CONTROLLER_TO_HOST,
    HEADER_LEN,
    PLAIN_NONCE,
    CommandBody,
    ConfigBody,
    DataBody,
    NonceLog,
    NonceReuse,
    Priority,
    ResultBody,
    TaskEnvelope,
    TaskQueue,
    TaskType,
    frame_plain,
    make_nonce,
    open_task,
    parse_envelope,
    seal_task,
    serialize_envelope,
    unframe_plain,
)
from hetee_sim.vectors import ENVELOPE_VECTOR

KEY = bytes(range(32))


def random_envelope(rng: random.Random) -> TaskEnvelope:
    return TaskEnvelope(
        TaskType(rng.randrange(4)),
        rng.getrandbits(64),
        rng.getrandbits(64),
        rng.randbytes(12),
        rng.randbytes(rng.randrange(0, 300)),
        rng.randbytes(16),
    )


class TestCodec:
    def test_empty_envelope_is_56_bytes(self):
        e = TaskEnvelope(TaskType.DATA, 1, 0, bytes(12), b"", bytes(16))
        assert len(serialize_envelope(e)) == 56

    def test_round_trip_random(self):
        rng = random.Random(1)
        for _ in range(1000):
            e = random_envelope(rng)
            raw = serialize_envelope(e)
            assert len(raw) == HEADER_LEN + len(e.ciphertext) + 16
            assert parse_envelope(raw) == e

    def test_layout(self):
        e = TaskEnvelope(TaskType.COMMAND, 0x0102, 0x0A, b"N" * 12, b"ct", b"T" * 16)
        raw = serialize_envelope(e)
        assert raw[:4] == b"HTEE"
        assert raw[4] == 1 and raw[5] == 1 and raw[6:8] == b"\0\0"
        assert raw[8:16] == (0x0102).to_bytes(8, "little")
        assert raw[16:24] == (0x0A).to_bytes(8, "little")
        assert raw[24:36] == b"N" * 12
        assert raw[36:40] == (2).to_bytes(4, "little")

    def test_bad_magic(self):
        raw = bytearray(serialize_envelope(random_envelope(random.Random(2))))
        raw[0] ^= 1
        with pytest.raises(BadMagic):
            parse_envelope(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(serialize_envelope(random_envelope(random.Random(2))))
        raw[4] = 2
        with pytest.raises(BadVersion):
            parse_envelope(bytes(raw))

    def test_truncated(self):
        raw = serialize_envelope(TaskEnvelope(TaskType.DATA, 1, 0, bytes(12), b"abc", bytes(16)))
        with pytest.raises(Truncated):
            parse_envelope(raw[:-1])
        with pytest.raises(Truncated):
            parse_envelope(raw[:10])

    def test_trailing_garbage(self):
        raw = serialize_envelope(TaskEnvelope(TaskType.DATA, 1, 0, bytes(12), b"abc", bytes(16)))
        with pytest.raises(LengthMismatch):
            parse_envelope(raw + b"\0")

    def test_unknown_type(self):
        raw = bytearray(serialize_envelope(TaskEnvelope(TaskType.DATA, 1, 0, bytes(12), b"", bytes(16))))
        raw[5] = 9
        with pytest.raises(ParseError):
            parse_envelope(bytes(raw))

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=120))
    def test_parse_never_crashes(self, data):
        try:
            e = parse_envelope(data)
        except ParseError:
            return
        assert serialize_envelope(e) == data


class TestSealing:
    def test_golden_vector(self):
        v = ENVELOPE_VECTOR
        e = seal_task(v["body"], v["key"], v["task_id"], v["seq"], v["task_type"])
        assert serialize_envelope(e) == v["expected"]
        assert open_task(parse_envelope(v["expected"]), v["key"], v["seq"]) == v["body"]

    def test_matches_reference_aead(self):
        rng = random.Random(3)
        for _ in range(50):
            key = rng.randbytes(32)
            body = DataBody(rng.randbytes(rng.randrange(0, 200)), rng.random() < 0.5)
            task_id, seq = rng.getrandbits(64), rng.getrandbits(63)
            e = seal_task(body, key, task_id, seq, TaskType.DATA)
            raw = serialize_envelope(e)
            cipher = AES.new(key, AES.MODE_GCM, nonce=make_nonce(0, seq))
            cipher.update(raw[:24] + raw[36:40])
            ct, tag = cipher.encrypt_and_digest(body.encode())
            assert (e.ciphertext, e.tag) == (ct, tag)

    @settings(max_examples=100, deadline=None)
    @given(st.binary(max_size=4096), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
    def test_round_trip(self, payload, task_id, seq):
        e = seal_task(DataBody(payload, True), KEY, task_id, seq, TaskType.DATA)
        assert open_task(parse_envelope(serialize_envelope(e)), KEY, seq) == DataBody(payload, True)

    def test_one_megabyte_body(self):
        payload = os.urandom(1 << 20)
        e = seal_task(DataBody(payload), KEY, 1, 0, TaskType.DATA)
        assert open_task(e, KEY, 0).payload == payload

    def test_body_kinds_round_trip(self):
        bodies = [
            (TaskType.CONFIGURATION, ConfigBody("gpu", 2, Priority.HIGH)),
            (TaskType.COMMAND, CommandBody(TaskProgram.standard(MatMul(2, 2, 2)))),
            (TaskType.DATA, DataBody(b"abc")),
            (TaskType.RESULT, ResultBody(b"xyz", True)),
        ]
        for i, (t, body) in enumerate(bodies):
            assert open_task(seal_task(body, KEY, 5, i, t), KEY, i) == body

    def test_nonce_and_ciphertext_differ_per_seq(self):
        a = seal_task(DataBody(b"same"), KEY, 1, 0, TaskType.DATA)
        b = seal_task(DataBody(b"same"), KEY, 1, 1, TaskType.DATA)
        assert a.nonce != b.nonce and a.ciphertext != b.ciphertext

    def test_wrong_key(self):
        e = seal_task(DataBody(b"x"), KEY, 1, 0, TaskType.DATA)
        with pytest.raises(AuthFailure):
            open_task(e, bytes(32), 0)

    def test_wrong_direction(self):
        e = seal_task(DataBody(b"x"), KEY, 1, 0, TaskType.DATA)
        with pytest.raises(AuthFailure):
            open_task(e, KEY, 0, direction=CONTROLLER_TO_HOST)

    def test_replay(self):
        e = seal_task(DataBody(b"x"), KEY, 1, 0, TaskType.DATA)
        with pytest.raises(SequenceViolation):
            open_task(e, KEY, 1)

    def test_malformed_body(self):
        e = seal_task(b"\x07junk", KEY, 1, 0, TaskType.DATA)
        with pytest.raises(MalformedBody):
            open_task(e, KEY, 0)
        e = seal_task(b"{not json", KEY, 1, 1, TaskType.COMMAND)
        with pytest.raises(MalformedBody):
            open_task(e, KEY, 1)

    def test_every_single_bit_flip_rejected(self):
        e = seal_task(DataBody(b"tiny"), KEY, 9, 3, TaskType.DATA)
        raw = serialize_envelope(e)
        for bit in range(len(raw) * 8):
            mutated = bytearray(raw)
            mutated[bit // 8] ^= 1 << (bit % 8)
            try:
                got = open_task(parse_envelope(bytes(mutated)), KEY, 3)
            except (ParseError, AuthFailure, SequenceViolation):
                continue
            pytest.fail(f"bit {bit} accepted as {got!r}")

    def test_random_ciphertext_flips(self):
        rng = random.Random(5)
        e = seal_task(DataBody(rng.randbytes(512)), KEY, 9, 0, TaskType.DATA)
        for _ in range(100):
            ct = bytearray(e.ciphertext)
            i = rng.randrange(len(ct) * 8)
            ct[i // 8] ^= 1 << (i % 8)
            bad = TaskEnvelope(e.task_type, e.task_id, e.seq, e.nonce, bytes(ct), e.tag)
            with pytest.raises(AuthFailure):
                open_task(bad, KEY, 0)


class TestNonceLog:
    def test_reuse_detected(self):
        log = NonceLog()
        seal_task(DataBody(b"a"), KEY, 1, 0, TaskType.DATA, nonce_log=log)
        with pytest.raises(NonceReuse):
            seal_task(DataBody(b"b"), KEY, 1, 0, TaskType.DATA, nonce_log=log)

    def test_directions_do_not_collide(self):
        log = NonceLog()
        seal_task(DataBody(b"a"), KEY, 1, 0, TaskType.DATA, nonce_log=log)
        seal_task(ResultBody(b"a"), KEY, 1, 0, TaskType.RESULT, nonce_log=log)
        assert log.count == 2


class TestPlainFrames:
    def test_round_trip(self):
        e = frame_plain(b"hello", 0)
        assert e.nonce == PLAIN_NONCE
        assert unframe_plain(parse_envelope(serialize_envelope(e))) == b"hello"

    def test_checksum(self):
        e = frame_plain(b"hello", 0)
        bad = TaskEnvelope(e.task_type, e.task_id, e.seq, e.nonce, b"jello", e.tag)
        with pytest.raises(AuthFailure):
            unframe_plain(bad)

    def test_sealed_frame_is_not_plain(self):
        e = seal_task(ConfigBody("gpu", 1), KEY, 0, 0, TaskType.CONFIGURATION)
        with pytest.raises(ParseError):
            unframe_plain(e)


def _sender(n, task_id=4):
    return [seal_task(DataBody(f"body-{i}".encode()), KEY, task_id, i, TaskType.DATA) for i in range(n)]


def deliver(queue, order, envelopes):
    """Deliver in ``order``; rejected envelopes are re-sent in sender order after the pass."""
    accepted = []
    pending = list(order)
    while pending:
        retry = []
        for i in pending:
            try:
                accepted.append(queue.accept(envelopes[i]).payload)
            except SequenceViolation:
                retry.append(i)
        if retry == pending:
            break
        pending = sorted(retry)
    return accepted


class TestTaskQueue:
    def test_in_order(self):
        q = TaskQueue(1, 4, KEY)
        envs = _sender(3)
        assert [q.accept(e).payload for e in envs] == [b"body-0", b"body-1", b"body-2"]
        assert q.next_seq_in == 3

    def test_zero_two_one(self):
        q = TaskQueue(1, 4, KEY)
        envs = _sender(3)
        q.accept(envs[0])
        with pytest.raises(SequenceViolation):
            q.accept(envs[2])
        q.accept(envs[1])
        q.accept(envs[2])
        assert q.rejected == 1 and q.accepted == 3

    def test_all_permutations_of_three(self):
        envs = _sender(3)
        for order in itertools.permutations(range(3)):
            q = TaskQueue(1, 4, KEY)
            accepted = []
            for i in order:
                try:
                    accepted.append(q.accept(envs[i]).payload)
                except SequenceViolation:
                    pass
            expected = [b"body-0", b"body-1", b"body-2"]
            # what got through is always a prefix of the emission order
            assert accepted == expected[: len(accepted)]
            assert q.rejected == 3 - len(accepted)
            assert deliver(TaskQueue(1, 4, KEY), order, envs) == expected

    def test_shuffles(self):
        rng = random.Random(8)
        envs = _sender(100)
        expected = [f"body-{i}".encode() for i in range(100)]
        for _ in range(20):
            order = list(range(100))
            rng.shuffle(order)
            q = TaskQueue(1, 4, KEY)
            accepted = []
            for i in order:
                try:
                    accepted.append(q.accept(envs[i]).payload)
                except SequenceViolation:
                    pass
            assert accepted == expected[: len(accepted)]
            # replaying anything already consumed is always rejected
            for e in envs[: len(accepted)]:
                with pytest.raises(SequenceViolation):
                    q.accept(e)

    def test_wrong_task_id(self):
        q = TaskQueue(1, 4, KEY)
        with pytest.raises(AuthFailure):
            q.accept(_sender(1, task_id=5)[0])
        assert q.next_seq_in == 0

    def test_result_envelope_rejected_inbound(self):
        q = TaskQueue(1, 4, KEY)
        e = seal_task(ResultBody(b"x"), KEY, 4, 0, TaskType.RESULT)
        with pytest.raises(MalformedBody):
            q.accept(e)

    def test_emit_increments(self):
        q = TaskQueue(1, 4, KEY)
        a, b = q.emit(ResultBody(b"r0")), q.emit(ResultBody(b"r1"))
        assert (a.seq, b.seq) == (0, 1)
        assert open_task(b, KEY, 1) == ResultBody(b"r1")
