"""Simulated accelerators.

Each device has six named memory regions. Kernels leave *taint sentinels*
(task id + marker value) in the regions they touch; cleanup methods remove
them according to a fixed residual model and charge the measured cost of the
corresponding real method. The taint map is the leakage oracle used by the
isolation tests.

Residual model for the vendor reset paths (a model, not vendor ground truth):

* ``ApiDeviceReset`` / ``ApiCtxDestroy`` drop the taints of the task that
  owns the current context, in every region. Taints of earlier tasks stay.
* ``SoftwareReboot`` clears registers, local, shared and global memory;
  both caches keep whatever they held.
* ``CodeClean(regions)`` clears exactly the listed regions.
* ``ColdReboot`` and ``TrustedComposite`` clear everything.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from decimal import Decimal
from functools import lru_cache
from importlib import resources
from typing import Union

import numpy as np

from .clock import NS_PER_MS, NS_PER_S, ms_to_ns
from .errors import DeviceBusy, ShapeMismatch


class Region(enum.Enum):
    REGISTERS = "Registers"
    LOCAL_MEM = "LocalMem"
    SHARED_MEM = "SharedMem"
    GLOBAL_MEM = "GlobalMem"
    L1_CACHE = "L1Cache"
    L2_CACHE = "L2Cache"


ALL_REGIONS: frozenset[Region] = frozenset(Region)
CACHE_REGIONS: frozenset[Region] = frozenset({Region.L1_CACHE, Region.L2_CACHE})
SOFTWARE_REBOOT_CLEARS: frozenset[Region] = ALL_REGIONS - CACHE_REGIONS


class CleanupKind(enum.Enum):
    API_DEVICE_RESET = "ApiDeviceReset"
    API_CTX_DESTROY = "ApiCtxDestroy"
    SOFTWARE_REBOOT = "SoftwareReboot"
    CODE_CLEAN = "CodeClean"
    COLD_REBOOT = "ColdReboot"
    TRUSTED_COMPOSITE = "TrustedComposite"


@dataclass(frozen=True)
class CleanupMethod:
    kind: CleanupKind
    regions: frozenset[Region] = frozenset()

    def __post_init__(self):
        if self.kind is CleanupKind.CODE_CLEAN:
            if not self.regions:
                raise ValueError("CodeClean needs at least one region")
        elif self.regions:
            raise ValueError(f"{self.kind.value} takes no region set")

    @classmethod
    def code_clean(cls, *regions: Region) -> "CleanupMethod":
        return cls(CleanupKind.CODE_CLEAN, frozenset(regions))

    def __str__(self) -> str:
        if self.kind is CleanupKind.CODE_CLEAN:
            names = ",".join(sorted(r.value for r in self.regions))
            return f"CodeClean({names})"
        return self.kind.value


API_DEVICE_RESET = CleanupMethod(CleanupKind.API_DEVICE_RESET)
API_CTX_DESTROY = CleanupMethod(CleanupKind.API_CTX_DESTROY)
SOFTWARE_REBOOT = CleanupMethod(CleanupKind.SOFTWARE_REBOOT)
COLD_REBOOT = CleanupMethod(CleanupKind.COLD_REBOOT)
TRUSTED_COMPOSITE = CleanupMethod(CleanupKind.TRUSTED_COMPOSITE)


@dataclass(frozen=True)
class CostTable:
    """Cleanup costs (ns) and region sizes (bytes) as shipped in the data file."""

    version: int
    method_ns: dict[CleanupKind, int]
    region_ns: dict[Region, int]
    region_sizes: dict[Region, int]
    # exact decimal milliseconds, kept for fidelity checks
    method_ms: dict[CleanupKind, Decimal]
    region_ms: dict[Region, Decimal]

    def code_clean_ns(self, regions: frozenset[Region]) -> int:
        return sum(self.region_ns[r] for r in regions)

    def elapsed_ns(self, method: CleanupMethod, cold_reboot_ns: int | None = None) -> int:
        kind = method.kind
        if kind is CleanupKind.CODE_CLEAN:
            return self.code_clean_ns(method.regions)
        if kind is CleanupKind.TRUSTED_COMPOSITE:
            return self.code_clean_ns(ALL_REGIONS) + self.method_ns[CleanupKind.API_DEVICE_RESET]
        if kind is CleanupKind.COLD_REBOOT and cold_reboot_ns is not None:
            return cold_reboot_ns
        return self.method_ns[kind]


def _raw_cost_table() -> dict:
    text = resources.files("hetee_sim").joinpath("data/cleanup_costs.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=1)
def load_cost_table() -> CostTable:
    raw = _raw_cost_table()
    method_ms = {CleanupKind(k): Decimal(v["cost_ms"]) for k, v in raw["methods"].items()}
    region_ms = {Region(k): Decimal(v["cost_ms"]) for k, v in raw["regions"].items()}
    sizes = {}
    for name, entry in raw["regions"].items():
        product = int(np.prod(entry["size"], dtype=object))
        if product != entry["size_bytes"]:
            raise ValueError(f"cost table: size mismatch for {name}")
        sizes[Region(name)] = product
    return CostTable(
        version=raw["version"],
        method_ns={k: ms_to_ns(v) for k, v in method_ms.items()},
        region_ns={k: ms_to_ns(v) for k, v in region_ms.items()},
        region_sizes=sizes,
        method_ms=method_ms,
        region_ms=region_ms,
    )


@dataclass
class DeviceProfile:
    region_sizes: dict[Region, int] = field(default_factory=lambda: dict(load_cost_table().region_sizes))
    compute_flops: int = 7_000_000_000_000
    cold_reboot_ms: float = 120_000

    def __post_init__(self):
        if set(self.region_sizes) != ALL_REGIONS:
            raise ValueError("profile must size all six regions")
        if any(size <= 0 for size in self.region_sizes.values()):
            raise ValueError("region sizes must be positive")
        if self.compute_flops <= 0:
            raise ValueError("compute rate must be positive")
        self.compute_flops = int(self.compute_flops)

    @property
    def cold_reboot_ns(self) -> int:
        return ms_to_ns(self.cold_reboot_ms)


@dataclass(frozen=True)
class MatMul:
    """Integer matrix product of an n x m and an m x k int64 matrix."""

    n: int
    m: int
    k: int

    def __post_init__(self):
        if min(self.n, self.m, self.k) <= 0:
            raise ValueError("matrix dimensions must be positive")

    @property
    def flops(self) -> int:
        return 2 * self.n * self.m * self.k

    @property
    def in_bytes(self) -> int:
        return 8 * (self.n * self.m + self.m * self.k)

    @property
    def out_bytes(self) -> int:
        return 8 * self.n * self.k


@dataclass(frozen=True)
class Synthetic:
    flops: int
    in_bytes: int
    out_bytes: int

    def __post_init__(self):
        if self.flops <= 0 or self.in_bytes <= 0 or self.out_bytes <= 0:
            raise ValueError("synthetic kernel parameters must be positive")


KernelKind = Union[MatMul, Synthetic]


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind
    task_id: int
    touched: frozenset[Region] = ALL_REGIONS

    @property
    def flops(self) -> int:
        return self.kind.flops

    @property
    def in_bytes(self) -> int:
        return self.kind.in_bytes

    @property
    def out_bytes(self) -> int:
        return self.kind.out_bytes


@dataclass(frozen=True)
class Taint:
    task_id: int
    sentinel: int


@dataclass(frozen=True)
class KernelResult:
    output: bytes
    start_ns: int
    end_ns: int

    @property
    def elapsed_ns(self) -> int:
        return self.end_ns - self.start_ns

    @property
    def elapsed_ms(self) -> float:
        return self.elapsed_ns / NS_PER_MS


@dataclass(frozen=True)
class CleanupReport:
    method: CleanupMethod
    elapsed_ns: int
    residual: frozenset[Region]
    start_ns: int = 0

    @property
    def elapsed_ms(self) -> float:
        return self.elapsed_ns / NS_PER_MS

    @property
    def end_ns(self) -> int:
        return self.start_ns + self.elapsed_ns


SYNTHETIC_KEY = b"hetee-sim/synthetic-kernel/v1"


def matmul_bytes(spec: MatMul, data: bytes) -> bytes:
    a = np.frombuffer(data, dtype="<i8", count=spec.n * spec.m).reshape(spec.n, spec.m)
    b = np.frombuffer(data, dtype="<i8", offset=8 * spec.n * spec.m).reshape(spec.m, spec.k)
    with np.errstate(over="ignore"):
        c = a @ b
    return c.astype("<i8").tobytes()


def synthetic_bytes(spec: Synthetic, data: bytes) -> bytes:
    h = hashlib.shake_256(SYNTHETIC_KEY)
    h.update(len(data).to_bytes(8, "little"))
    h.update(data)
    return h.digest(spec.out_bytes)


def run_kernel(kind: KernelKind, data: bytes) -> bytes:
    """Pure kernel semantics, no timing or taint side effects."""
    if len(data) != kind.in_bytes:
        raise ShapeMismatch(f"kernel expects {kind.in_bytes} input bytes, got {len(data)}")
    if isinstance(kind, MatMul):
        return matmul_bytes(kind, data)
    return synthetic_bytes(kind, data)


def compute_ns(flops: int, rate: int) -> int:
    return -(-flops * NS_PER_S // rate)


class AcceleratorDevice:
    """One accelerator: a sequential executor plus its taint map.

    ``free_at`` is the device's own virtual timeline; operations start at
    ``max(start_ns, free_at)``.
    """

    def __init__(self, name: str, profile: DeviceProfile | None = None, costs: CostTable | None = None):
        self.name = name
        self.profile = profile or DeviceProfile()
        self.costs = costs or load_cost_table()
        self.taints: dict[Region, set[Taint]] = {r: set() for r in Region}
        self.current_task: int | None = None
        self.in_flight: int | None = None
        self.free_at = 0
        self.trusted = True
        self._sentinels = 0

    def __repr__(self) -> str:
        return f"AcceleratorDevice({self.name!r})"

    # -- work ------------------------------------------------------------

    def occupy(self, task_id: int) -> None:
        """Mark a long-running kernel as in flight (insecure background work)."""
        if self.in_flight is not None:
            raise DeviceBusy(f"{self.name} is running task {self.in_flight}")
        self.in_flight = task_id
        self.current_task = task_id
        self._taint(task_id, ALL_REGIONS)

    def halt(self) -> int | None:
        """Stop whatever is in flight; returns the halted task id."""
        halted, self.in_flight = self.in_flight, None
        return halted

    def _taint(self, task_id: int, regions: frozenset[Region]) -> None:
        for region in regions:
            self._sentinels += 1
            digest = hashlib.blake2b(
                f"{self.name}/{task_id}/{self._sentinels}".encode(), digest_size=8
            ).digest()
            self.taints[region].add(Taint(task_id, int.from_bytes(digest, "little")))
        self.trusted = False

    def execute_kernel(self, spec: KernelSpec, data: bytes, *, start_ns: int = 0) -> KernelResult:
        if self.in_flight is not None:
            raise DeviceBusy(f"{self.name} is running task {self.in_flight}")
        output = run_kernel(spec.kind, data)
        start = max(start_ns, self.free_at)
        end = start + compute_ns(spec.flops, self.profile.compute_flops)
        self.current_task = spec.task_id
        self._taint(spec.task_id, spec.touched)
        self.free_at = end
        return KernelResult(output, start, end)

    # -- cleanup ---------------------------------------------------------

    def cleanup(self, method: CleanupMethod, *, start_ns: int = 0) -> CleanupReport:
        if self.in_flight is not None:
            raise DeviceBusy(f"{self.name} is running task {self.in_flight}")
        kind = method.kind
        if kind in (CleanupKind.API_DEVICE_RESET, CleanupKind.API_CTX_DESTROY):
            if self.current_task is not None:
                for region in Region:
                    self.taints[region] = {t for t in self.taints[region] if t.task_id != self.current_task}
            self.current_task = None
        elif kind is CleanupKind.SOFTWARE_REBOOT:
            self._clear(SOFTWARE_REBOOT_CLEARS)
            self.current_task = None
        elif kind is CleanupKind.CODE_CLEAN:
            self._clear(method.regions)
        else:  # COLD_REBOOT, TRUSTED_COMPOSITE
            self._clear(ALL_REGIONS)
            self.current_task = None
        elapsed = self.costs.elapsed_ns(method, self.profile.cold_reboot_ns)
        start = max(start_ns, self.free_at)
        self.free_at = start + elapsed
        residual = self.residual_regions()
        if not residual:
            self.trusted = True
        return CleanupReport(method, elapsed, residual, start)

    def _clear(self, regions: frozenset[Region]) -> None:
        for region in regions:
            self.taints[region] = set()

    def reset_to_trusted_state(self, *, start_ns: int = 0) -> CleanupReport:
        """Halt any in-flight work, then run the composite cleanup."""
        self.halt()
        return self.cleanup(TRUSTED_COMPOSITE, start_ns=start_ns)

    # -- inspection ------------------------------------------------------

    def residual_regions(self) -> frozenset[Region]:
        return frozenset(r for r, ts in self.taints.items() if ts)

    def inspect_residual(self) -> frozenset[tuple[Region, int]]:
        return frozenset((r, t.task_id) for r, ts in self.taints.items() for t in ts)
