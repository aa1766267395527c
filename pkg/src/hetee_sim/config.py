"""Run configuration.

A run is described by one YAML (or JSON) document::

    schema_version: 1
    seed: 7
    fabric:   {lane_budget: 97, lanes_per_device: 16, reserved_lanes: 17,
               dma_base_us: 1.0, dma_bandwidth_bytes_per_s: 12000000000}
    devices:  {count: 4, compute_flops: 7000000000000, cold_reboot_ms: 120000}
    costs:    {crypto_base_us: 2.0, crypto_bytes_per_s: 1600000000,
               task_parse_us: 5.0, prototype_copy: false,
               internal_copy_base_us: 10.0, internal_copy_bytes_per_s: 800000000,
               preprocess_us: 0.0}
    controller: {wait_for_devices: true, accel_type: gpu}
    bench:    {profiles: [AlexNet, ...], batch_sizes: [16, 32, 64],
               device_counts: [1, 2, 4], chunks_per_batch: 4, ...}
    boot:     {firmware: "...", system_software: "..."}

Every section and key is optional; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .clock import transfer_ns, us_to_ns
from .errors import ConfigInvalid
from .fabric import FabricConfig

SCHEMA_VERSION = 1


@dataclass
class CostModel:
    """Virtual-time costs of the protected path (ns helpers below)."""

    crypto_base_us: float = 2.0
    crypto_bytes_per_s: int | None = 1_600_000_000
    task_parse_us: float = 5.0
    prototype_copy: bool = False
    internal_copy_base_us: float = 10.0
    internal_copy_bytes_per_s: int | None = 800_000_000
    preprocess_us: float = 0.0

    def crypto_ns(self, nbytes: int) -> int:
        return us_to_ns(self.crypto_base_us) + transfer_ns(nbytes, self.crypto_bytes_per_s)

    def parse_ns(self) -> int:
        return us_to_ns(self.task_parse_us)

    def internal_copy_ns(self, nbytes: int) -> int:
        if not self.prototype_copy:
            return 0
        return us_to_ns(self.internal_copy_base_us) + transfer_ns(nbytes, self.internal_copy_bytes_per_s)

    def preprocess_ns(self) -> int:
        return us_to_ns(self.preprocess_us)

    @classmethod
    def zero(cls) -> "CostModel":
        return cls(0.0, None, 0.0, False, 0.0, None, 0.0)


@dataclass
class DeviceConfig:
    count: int = 4
    compute_flops: int = 7_000_000_000_000
    cold_reboot_ms: float = 120_000
    names: list[str] | None = None

    def device_names(self) -> list[str]:
        if self.names is not None:
            return list(self.names)
        return [f"gpu{i}" for i in range(self.count)]


@dataclass
class ControllerConfig:
    wait_for_devices: bool = True
    accel_type: str = "gpu"


@dataclass
class BenchConfig:
    profiles: list[str] = field(
        default_factory=lambda: ["AlexNet", "VGG16", "GoogLeNet", "ResNet50", "ResNet101", "ResNet152"]
    )
    batch_sizes: list[int] = field(default_factory=lambda: [16, 32, 64])
    device_counts: list[int] = field(default_factory=lambda: [1, 2, 4])
    modes: list[str] = field(default_factory=lambda: ["baseline", "hetee"])
    chunks_per_batch: int = 4
    flops_per_param_layer: float = 2_000_000.0
    bytes_per_element: int = 1
    output_bytes_per_sample: int = 4000
    # shrinks bytes per sample (and with them every size-dependent cost)
    payload_scale: float = 1.0
    custom_profiles: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class BootConfig:
    firmware: str = "hetee-sim firmware v1"
    system_software: str = "hetee-sim trusted os v1"
    vendor_seed: str = "hetee-sim vendor key"
    identity_seed: str = "hetee-sim device key"


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    fabric: FabricConfig = field(default_factory=FabricConfig)
    devices: DeviceConfig = field(default_factory=DeviceConfig)
    costs: CostModel = field(default_factory=CostModel)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    boot: BootConfig = field(default_factory=BootConfig)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigInvalid(f"unsupported schema_version {self.schema_version}")
        if self.devices.count < 0 or self.devices.compute_flops <= 0:
            raise ConfigInvalid("devices: count must be >= 0 and compute_flops > 0")
        if self.devices.names is not None and len(self.devices.names) != self.devices.count:
            raise ConfigInvalid("devices: names must list exactly `count` entries")
        if self.fabric.lane_budget <= 0 or self.fabric.lanes_per_device <= 0:
            raise ConfigInvalid("fabric: lane counts must be positive")
        if not self.bench.batch_sizes or any(b <= 0 for b in self.bench.batch_sizes):
            raise ConfigInvalid("bench: batch sizes must be positive")
        if not self.bench.device_counts or any(d <= 0 for d in self.bench.device_counts):
            raise ConfigInvalid("bench: device counts must be positive")
        if max(self.bench.device_counts) > self.devices.count:
            raise ConfigInvalid("bench: device count exceeds the pool")
        if self.bench.chunks_per_batch <= 0:
            raise ConfigInvalid("bench: chunks_per_batch must be positive")
        if not 0 < self.bench.payload_scale <= 1:
            raise ConfigInvalid("bench: payload_scale must be in (0, 1]")
        unknown = set(self.bench.modes) - {"baseline", "hetee"}
        if unknown:
            raise ConfigInvalid(f"bench: unknown modes {sorted(unknown)}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {
    "fabric": FabricConfig,
    "devices": DeviceConfig,
    "costs": CostModel,
    "controller": ControllerConfig,
    "bench": BenchConfig,
    "boot": BootConfig,
}


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigInvalid(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{where}: {exc}") from None


def config_from_dict(data: dict[str, Any] | None) -> RunConfig:
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    extra = set(data) - top
    if extra:
        raise ConfigInvalid(f"unknown top-level keys {sorted(extra)}")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, data.get(name), name)
    for scalar in ("schema_version", "seed"):
        if scalar in data:
            if not isinstance(data[scalar], int):
                raise ConfigInvalid(f"{scalar} must be an integer")
            kwargs[scalar] = data[scalar]
    return RunConfig(**kwargs).validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigInvalid(f"{path}: top level must be a mapping")
    return config_from_dict(data)
