"""Checked-in known-answer vectors.

The envelope vector was produced once with an independent AES-GCM
implementation and frozen here; the measurement vector with a
step-by-step hash fold. ``verify_vectors`` recomputes each with the
package's own code.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal

from .accel import CleanupKind, Region, load_cost_table
from .attest import measure_boot, verify_signature
from .protocol import DataBody, TaskType, parse_envelope, open_task, seal_task, serialize_envelope

ENVELOPE_VECTOR = {
    "key": bytes(range(32)),
    "task_type": TaskType.DATA,
    "task_id": 0x0102030405060708,
    "seq": 5,
    "body": DataBody(b"hetee golden vector payload"),
    "expected": bytes.fromhex(
        "4854454501020000080706050403020105000000000000000000000005000000"
        "000000001c0000007e657de99dfb2a24b5482926d6daea4ddd308504192c2537"
        "b573141084e6df3cc0e6361e37d37edce8982032"
    ),
}

MEASUREMENT_VECTOR = {
    "firmware": b"hetee-sim firmware v1",
    "system_software": b"hetee-sim trusted os v1",
    "digest": bytes.fromhex("5f07d9f7e980087ad74cb1967d1a51c3e960cd79fae3ca3d2c2d0da8293e55ba"),
}

# RFC 8032, section 7.1, test 1 (empty message)
ED25519_VECTOR = {
    "public": bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"),
    "message": b"",
    "signature": bytes.fromhex(
        "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555"
        "fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"
    ),
}

CLEANUP_COSTS_MS = {
    CleanupKind.API_DEVICE_RESET: Decimal("71"),
    CleanupKind.API_CTX_DESTROY: Decimal("53"),
    CleanupKind.SOFTWARE_REBOOT: Decimal("975"),
    Region.REGISTERS: Decimal("0.019"),
    Region.LOCAL_MEM: Decimal("50"),
    Region.SHARED_MEM: Decimal("0.020"),
    Region.GLOBAL_MEM: Decimal("44"),
    Region.L1_CACHE: Decimal("0.019"),
    Region.L2_CACHE: Decimal("0.040"),
}

CLEAR_SIZES = {
    Region.REGISTERS: 24 * 65536 * 4,
    Region.LOCAL_MEM: 24 * 1024 * 512 * 1024,
    Region.SHARED_MEM: 24 * 96 * 1024,
    Region.GLOBAL_MEM: 12 * 1024**3,
    Region.L1_CACHE: 24 * 48 * 1024,
    Region.L2_CACHE: 3 * 1024**2,
}


@dataclass(frozen=True)
class VectorCheck:
    name: str
    ok: bool
    detail: str = ""


def _envelope() -> VectorCheck:
    v = ENVELOPE_VECTOR
    env = seal_task(v["body"], v["key"], v["task_id"], v["seq"], v["task_type"])
    raw = serialize_envelope(env)
    if raw != v["expected"]:
        return VectorCheck("envelope", False, f"got {raw.hex()}")
    body = open_task(parse_envelope(v["expected"]), v["key"], v["seq"])
    return VectorCheck("envelope", body == v["body"])


def _measurement() -> VectorCheck:
    v = MEASUREMENT_VECTOR
    got = measure_boot(v["firmware"], v["system_software"]).digest
    return VectorCheck("measurement", got == v["digest"], got.hex())


def _signature() -> VectorCheck:
    v = ED25519_VECTOR
    return VectorCheck("ed25519", verify_signature(v["public"], v["signature"], v["message"]))


def _cost_table() -> VectorCheck:
    table = load_cost_table()
    bad = []
    for name, ms in CLEANUP_COSTS_MS.items():
        got = table.region_ms[name] if isinstance(name, Region) else table.method_ms[name]
        if got != ms:
            bad.append(f"{name}: {got} != {ms}")
    for region, size in CLEAR_SIZES.items():
        if table.region_sizes[region] != size:
            bad.append(f"{region} size {table.region_sizes[region]} != {size}")
    return VectorCheck("cleanup-costs", not bad, "; ".join(bad))


def verify_vectors() -> list[VectorCheck]:
    return [_envelope(), _measurement(), _signature(), _cost_table()]
