"""Assembling a simulated machine from a run configuration."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from .accel import AcceleratorDevice, DeviceProfile, KernelKind, KernelSpec
from .attest import DeviceIdentity, sign_image
from .clock import VirtualClock
from .config import CostModel, RunConfig
from .fabric import EndpointId, Fabric, controller, device, host
from .protocol import NonceLog


@dataclass
class Platform:
    config: RunConfig
    clock: VirtualClock
    fabric: Fabric
    devices: dict[str, AcceleratorDevice]
    host: EndpointId
    rng: random.Random
    nonce_log: NonceLog = field(default_factory=NonceLog)

    @property
    def costs(self) -> CostModel:
        return self.config.costs


def build_platform(config: RunConfig | None = None, *, hosts: tuple[str, ...] = ("host0",)) -> Platform:
    config = config or RunConfig()
    clock = VirtualClock()
    names = config.devices.device_names()
    fabric = Fabric(
        config.fabric,
        clock,
        controller_id=controller(),
        hosts=[host(h) for h in hosts],
        devices=[device(n) for n in names],
    )
    profile = DeviceProfile(
        compute_flops=config.devices.compute_flops,
        cold_reboot_ms=config.devices.cold_reboot_ms,
    )
    devices = {n: AcceleratorDevice(n, profile) for n in names}
    return Platform(config, clock, fabric, devices, host(hosts[0]), random.Random(config.seed))


def seed_bytes(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()


@dataclass(frozen=True)
class BootBundle:
    """Signed images plus the keys needed to boot and attest a controller."""

    firmware: bytes
    firmware_sig: bytes
    system_sw: bytes
    system_sw_sig: bytes
    vendor: DeviceIdentity
    identity: DeviceIdentity

    @property
    def vendor_pubkey(self) -> bytes:
        return self.vendor.public_key


def boot_bundle(config: RunConfig | None = None, *, system_sw: bytes | None = None) -> BootBundle:
    boot = (config or RunConfig()).boot
    vendor = DeviceIdentity.from_seed(seed_bytes(boot.vendor_seed))
    identity = DeviceIdentity.from_seed(seed_bytes(boot.identity_seed))
    fw = boot.firmware.encode()
    sw = system_sw if system_sw is not None else boot.system_software.encode()
    return BootBundle(fw, sign_image(vendor, fw), sw, sign_image(vendor, sw), vendor, identity)


def fan_out(
    platform: Platform,
    names: list[str],
    src: EndpointId,
    units: list[tuple[int, bytes]],
    kernel: KernelKind,
    task_id: int,
    stage_start: int,
) -> list[tuple[int, bytes]]:
    """Run ``units`` over ``names`` in waves, one unit per device per wave.

    Inputs are DMA'd from ``src`` to each device, results come back to
    ``src``. Returns (index, output) pairs in completion order.
    """
    fabric = platform.fabric
    devs = sorted(names)
    done: list[tuple[int, bytes]] = []
    for w in range(0, len(units), len(devs)):
        launched = []
        for (index, chunk), name in zip(units[w : w + len(devs)], devs):
            dev = platform.devices[name]
            ep = fabric.endpoint(name)
            copy_in = fabric.dma_transfer(src, ep, len(chunk), not_before=max(stage_start, dev.free_at))
            result = dev.execute_kernel(KernelSpec(kernel, task_id), chunk, start_ns=copy_in.end_ns)
            launched.append((result.end_ns, index, name, result.output))
        for end_ns, index, name, output in sorted(launched):
            copy_out = fabric.dma_transfer(fabric.endpoint(name), src, len(output), not_before=end_ns)
            platform.devices[name].free_at = copy_out.end_ns
            done.append((index, output))
    return done
