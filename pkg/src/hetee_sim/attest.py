"""Secure boot measurement, quotes and attestation-bound key agreement.

Algorithms: SHA-256 for hashing, Ed25519 for device and vendor signatures,
X25519 for the ephemeral exchange, HKDF-SHA256 for key derivation.

Handshake (client = data owner, controller = attester)::

    1. client -> controller   nonce(32) || client_kex_pub(32)
    2. controller -> client   quote = digest || nonce || ctrl_kex_pub || sig
    3. client verifies the quote and derives the shared secret
    4. client -> controller   HMAC(confirm_key, "client finished" || H(m1||m2))

The controller checks message 4 before it will use the key. The session key
is HKDF(shared, salt=H(m1||m2||m4)).
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import random
from dataclasses import dataclass, field
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AttestationFailed, ConfirmationFailed, HandshakeError

DIGEST_LEN = 32
NONCE_LEN = 32
KEX_LEN = 32
SIG_LEN = 64
QUOTE_LEN = DIGEST_LEN + NONCE_LEN + KEX_LEN + SIG_LEN
HELLO_LEN = NONCE_LEN + KEX_LEN
FINISHED_LEN = 32


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class Measurement:
    digest: bytes
    log: tuple[tuple[str, bytes], ...]


def fold_measurements(log: list[tuple[str, bytes]] | tuple[tuple[str, bytes], ...]) -> bytes:
    acc = bytes(DIGEST_LEN)
    for _, component_hash in log:
        acc = sha256(acc + component_hash)
    return acc


def measure_boot(firmware: bytes, system_sw: bytes) -> Measurement:
    log = (("firmware", sha256(firmware)), ("system_software", sha256(system_sw)))
    return Measurement(fold_measurements(log), log)


def _raw_public(key: Ed25519PublicKey | X25519PublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


class DeviceIdentity:
    """Signing identity fused into a chip. The private half never leaves."""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._key = private_key
        self.public_key = _raw_public(private_key.public_key())
        self.device_id = sha256(self.public_key)[:8].hex()

    @classmethod
    def from_seed(cls, seed: bytes) -> "DeviceIdentity":
        if len(seed) != 32:
            raise ValueError("identity seed must be 32 bytes")
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    @classmethod
    def generate(cls) -> "DeviceIdentity":
        return cls(Ed25519PrivateKey.generate())

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)

    def __repr__(self) -> str:
        return f"DeviceIdentity(device_id={self.device_id!r})"

    def __getstate__(self):
        raise TypeError("device identities are not serializable")


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class Quote:
    digest: bytes
    nonce: bytes
    kex_public: bytes
    signature: bytes

    @property
    def signed_bytes(self) -> bytes:
        return self.digest + self.nonce + self.kex_public

    def serialize(self) -> bytes:
        return self.signed_bytes + self.signature

    @classmethod
    def parse(cls, data: bytes) -> "Quote":
        if len(data) != QUOTE_LEN:
            raise HandshakeError(f"quote must be {QUOTE_LEN} bytes, got {len(data)}")
        a, b, c = DIGEST_LEN, DIGEST_LEN + NONCE_LEN, DIGEST_LEN + NONCE_LEN + KEX_LEN
        return cls(data[:a], data[a:b], data[b:c], data[c:])


def generate_quote(identity: DeviceIdentity, measurement: Measurement, nonce: bytes, kex_public: bytes) -> Quote:
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 32 bytes")
    if len(kex_public) != KEX_LEN:
        raise ValueError("kex public value must be 32 bytes")
    body = measurement.digest + nonce + kex_public
    return Quote(measurement.digest, nonce, kex_public, identity.sign(body))


class RejectReason(enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    STALE_NONCE = "StaleNonce"
    UNEXPECTED_MEASUREMENT = "UnexpectedMeasurement"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: RejectReason | None = None

    def __bool__(self) -> bool:
        return self.accepted


def verify_quote(device_pubkey: bytes, quote: Quote, expected_nonce: bytes, expected_measurement: bytes | Measurement) -> Verdict:
    if isinstance(expected_measurement, Measurement):
        expected_measurement = expected_measurement.digest
    if not verify_signature(device_pubkey, quote.signature, quote.signed_bytes):
        return Verdict(False, RejectReason.BAD_SIGNATURE)
    if not hmac.compare_digest(quote.nonce, expected_nonce):
        return Verdict(False, RejectReason.STALE_NONCE)
    if not hmac.compare_digest(quote.digest, expected_measurement):
        return Verdict(False, RejectReason.UNEXPECTED_MEASUREMENT)
    return Verdict(True)


# -- secure boot ----------------------------------------------------------


def sign_image(vendor: DeviceIdentity, image: bytes) -> bytes:
    return vendor.sign(b"hetee-boot-image" + sha256(image))


def verify_image(vendor_pubkey: bytes, image: bytes, signature: bytes) -> bool:
    return verify_signature(vendor_pubkey, signature, b"hetee-boot-image" + sha256(image))


# -- key agreement --------------------------------------------------------


@dataclass(frozen=True)
class SessionKey:
    key: bytes = field(repr=False)
    transcript_hash: bytes


def _random_bytes(rng: random.Random | None, n: int) -> bytes:
    return rng.randbytes(n) if rng is not None else os.urandom(n)


def _hkdf(secret: bytes, salt: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=salt, info=info).derive(secret)


def _exchange(private: X25519PrivateKey, peer_public: bytes) -> bytes:
    try:
        return private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError as exc:
        raise HandshakeError(f"key exchange failed: {exc}") from None


def _confirm_mac(shared: bytes, th12: bytes) -> bytes:
    confirm_key = _hkdf(shared, th12, b"hetee-sim confirm")
    return hmac.new(confirm_key, b"client finished" + th12, hashlib.sha256).digest()


def _session_key(shared: bytes, m1: bytes, m2: bytes, m4: bytes) -> SessionKey:
    th = sha256(m1 + m2 + m4)
    return SessionKey(_hkdf(shared, th, b"hetee-sim session"), th)


class ClientHandshake:
    """Data-owner side of the attested exchange."""

    def __init__(self, device_pubkey: bytes, expected_measurement: bytes, rng: random.Random | None = None):
        self.device_pubkey = device_pubkey
        self.expected_measurement = expected_measurement
        self._eph = X25519PrivateKey.from_private_bytes(_random_bytes(rng, 32))
        self.nonce = _random_bytes(rng, NONCE_LEN)
        self._m1: bytes | None = None
        self.verdict: Verdict | None = None
        self.session: SessionKey | None = None

    def hello(self) -> bytes:
        self._m1 = self.nonce + _raw_public(self._eph.public_key())
        return self._m1

    def on_quote(self, m2: bytes) -> bytes:
        """Verify message 2, derive the key, return the confirmation message."""
        if self._m1 is None:
            raise HandshakeError("hello not sent")
        quote = Quote.parse(m2)
        self.verdict = verify_quote(self.device_pubkey, quote, self.nonce, self.expected_measurement)
        if not self.verdict:
            raise AttestationFailed(self.verdict.reason)
        shared = _exchange(self._eph, quote.kex_public)
        m4 = _confirm_mac(shared, sha256(self._m1 + m2))
        self._pending = _session_key(shared, self._m1, m2, m4)
        return m4

    def on_ack(self, accepted: bool) -> SessionKey:
        if not accepted:
            raise ConfirmationFailed("controller rejected key confirmation")
        self.session = self._pending
        return self.session


class ControllerHandshake:
    """Controller side; one instance per connecting client."""

    def __init__(self, identity: DeviceIdentity, measurement: Measurement, rng: random.Random | None = None):
        self.identity = identity
        self.measurement = measurement
        self._eph = X25519PrivateKey.from_private_bytes(_random_bytes(rng, 32))
        self._m1: bytes | None = None
        self._m2: bytes | None = None
        self.session: SessionKey | None = None

    def on_hello(self, m1: bytes) -> bytes:
        if len(m1) != HELLO_LEN:
            raise HandshakeError(f"hello must be {HELLO_LEN} bytes")
        self._m1 = m1
        nonce, _ = m1[:NONCE_LEN], m1[NONCE_LEN:]
        quote = generate_quote(self.identity, self.measurement, nonce, _raw_public(self._eph.public_key()))
        self._m2 = quote.serialize()
        return self._m2

    def on_finished(self, m4: bytes) -> SessionKey:
        if self._m1 is None or self._m2 is None:
            raise HandshakeError("finished before hello")
        try:
            shared = _exchange(self._eph, self._m1[NONCE_LEN:])
        except HandshakeError as exc:
            raise ConfirmationFailed(str(exc)) from None
        expected = _confirm_mac(shared, sha256(self._m1 + self._m2))
        if len(m4) != FINISHED_LEN or not hmac.compare_digest(expected, m4):
            raise ConfirmationFailed("key confirmation MAC mismatch")
        self.session = _session_key(shared, self._m1, self._m2, m4)
        return self.session


Tamper = Callable[[bytes], bytes]


def establish_session(
    client: ClientHandshake,
    controller: ControllerHandshake,
    *,
    tamper: dict[int, Tamper] | None = None,
) -> tuple[SessionKey, SessionKey]:
    """Run the flow in-process. ``tamper`` maps message number to a rewrite."""
    tamper = tamper or {}
    passthrough: Tamper = lambda b: b  # noqa: E731
    m1 = tamper.get(1, passthrough)(client.hello())
    m2 = tamper.get(2, passthrough)(controller.on_hello(m1))
    m4 = tamper.get(4, passthrough)(client.on_quote(m2))
    try:
        server_key = controller.on_finished(m4)
    except ConfirmationFailed:
        client.on_ack(False)
        raise
    return client.on_ack(True), server_key
