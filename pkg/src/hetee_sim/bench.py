"""Benchmark harness: protected vs. direct execution of inference-like batches.

Every (profile, batch size, device count, mode) cell runs on a fresh,
seeded platform. A batch is split into ``chunks_per_batch`` equal chunks,
each one synthetic kernel launch. Latency is broken into seven consecutive
phases, so the components always add up to the total exactly:

    data_preprocessing   host-side fixed cost before anything is sent
    host_send_task       sealing and DMA of the command and data tasks
    task_processing      controller parsing and opening of the tasks
    internal_task_copy   optional copy into the compute host (prototype_copy)
    accel_compute        device DMA plus kernels, all chunks
    internal_result_copy optional copy back (prototype_copy)
    host_receive_result  sealing, DMA and opening of the results

The baseline only has preprocessing and compute.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .clock import NS_PER_S, ns_to_us
from .config import RunConfig
from .controller import SecurityController
from .errors import ConfigInvalid, MissingCell
from .accel import Synthetic
from .host import LocalChannel, Mode, WorkloadSpec, attest_and_connect, run_direct_insecure, submit_workload
from .program import TaskProgram
from .protocol import ConfigBody, Priority
from .sim import boot_bundle, build_platform


@dataclass(frozen=True)
class WorkloadProfile:
    name: str
    params_millions: float
    layers: int
    input_shape: tuple[int, ...]
    classes: int = 1000
    batch_sizes: tuple[int, ...] = (16, 32, 64)

    def flops_per_sample(self, flops_per_param_layer: float) -> int:
        return max(1, round(flops_per_param_layer * self.params_millions * self.layers))

    def bytes_per_sample(self, bytes_per_element: int = 1, payload_scale: float = 1.0) -> int:
        return max(1, round(math.prod(self.input_shape) * bytes_per_element * payload_scale))


PROFILES: dict[str, WorkloadProfile] = {
    p.name: p
    for p in (
        WorkloadProfile("AlexNet", 60, 8, (227, 227, 3)),
        WorkloadProfile("VGG16", 138, 16, (224, 224, 3)),
        WorkloadProfile("GoogLeNet", 5, 22, (224, 224, 3)),
        WorkloadProfile("ResNet50", 25, 50, (224, 224, 3)),
        WorkloadProfile("ResNet101", 44, 101, (224, 224, 3)),
        WorkloadProfile("ResNet152", 60, 152, (224, 224, 3)),
    )
}

COMPONENTS = (
    "data_preprocessing",
    "host_send_task",
    "task_processing",
    "internal_task_copy",
    "accel_compute",
    "internal_result_copy",
    "host_receive_result",
)
_CHECKPOINTS = ("start", "preprocessed", "sent", "processed", "task_copied", "computed", "result_copied", "done")

# Published measurements from physical hardware, shown next to simulated
# results for orientation only. Nothing checks simulated output against them.
REFERENCE_CONSTANTS = {
    "inference_throughput_overhead_pct": 12.34,
    "training_throughput_overhead_pct": 9.87,
    "latency_increase_pct": 121.4,
    "internal_copy_share_pct": 14.6,
}
REFERENCE_LABEL = "published reference, hardware-measured, not a simulation target"


@dataclass(frozen=True)
class LatencyBreakdown:
    data_preprocessing: int = 0
    host_send_task: int = 0
    task_processing: int = 0
    internal_task_copy: int = 0
    accel_compute: int = 0
    internal_result_copy: int = 0
    host_receive_result: int = 0
    total: int = 0

    @classmethod
    def from_timestamps(cls, ts: dict[str, int]) -> "LatencyBreakdown":
        points = [ts[k] for k in _CHECKPOINTS]
        if any(b < a for a, b in zip(points, points[1:])):
            raise ValueError(f"phase timestamps are not monotone: {ts}")
        parts = [b - a for a, b in zip(points, points[1:])]
        return cls(*parts, total=points[-1] - points[0])

    def components(self) -> dict[str, int]:
        return {c: getattr(self, c) for c in COMPONENTS}

    def components_us(self) -> dict[str, float]:
        return {c: ns_to_us(v) for c, v in self.components().items()}

    @property
    def total_us(self) -> float:
        return ns_to_us(self.total)


CellKey = tuple[str, int, int, str]  # (profile, batch, devices, mode)


@dataclass
class ThroughputReport:
    profiles: list[str]
    batch_sizes: list[int]
    device_counts: list[int]
    modes: list[str]
    breakdowns: dict[CellKey, LatencyBreakdown] = field(default_factory=dict)

    def total_ns(self, key: CellKey) -> int:
        try:
            return self.breakdowns[key].total
        except KeyError:
            raise MissingCell(f"no cell {key}") from None

    def throughput(self, key: CellKey) -> float:
        """Samples per virtual second."""
        return key[1] * NS_PER_S / self.total_ns(key)

    def normalized(self, key: CellKey) -> float:
        """Throughput relative to the one-device baseline of the same profile and batch."""
        ref = (key[0], key[1], 1, Mode.BASELINE.value)
        return self.total_ns(ref) / self.total_ns(key) if key != ref else 1.0

    def cells(self) -> list[CellKey]:
        return [
            (p, b, d, m)
            for p in self.profiles
            for m in self.modes
            for b in self.batch_sizes
            for d in self.device_counts
            if (p, b, d, m) in self.breakdowns
        ]


@dataclass(frozen=True)
class OverheadRatio:
    ratio: float
    hetee_ns: int
    baseline_ns: int
    costs: dict


def _profiles(config: RunConfig) -> dict[str, WorkloadProfile]:
    table = dict(PROFILES)
    for raw in config.bench.custom_profiles:
        try:
            p = WorkloadProfile(
                str(raw["name"]),
                float(raw["params_millions"]),
                int(raw["layers"]),
                tuple(int(x) for x in raw["input_shape"]),
                int(raw.get("classes", 1000)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(f"bench.custom_profiles: {exc}") from None
        table[p.name] = p
    missing = [n for n in config.bench.profiles if n not in table]
    if missing:
        raise ConfigInvalid(f"bench: unknown profiles {missing}")
    return table


def batch_workload(config: RunConfig, profile: WorkloadProfile, batch: int) -> WorkloadSpec:
    """The synthetic program and input chunks for one batch."""
    b = config.bench
    if batch % b.chunks_per_batch:
        raise ConfigInvalid(f"batch size {batch} is not a multiple of chunks_per_batch={b.chunks_per_batch}")
    per_chunk = batch // b.chunks_per_batch
    kernel = Synthetic(
        flops=profile.flops_per_sample(b.flops_per_param_layer) * per_chunk,
        in_bytes=profile.bytes_per_sample(b.bytes_per_element, b.payload_scale) * per_chunk,
        out_bytes=max(1, round(b.output_bytes_per_sample * b.payload_scale)) * per_chunk,
    )
    rng = random.Random(f"{config.seed}/{profile.name}/{batch}")
    inputs = [rng.randbytes(kernel.in_bytes) for _ in range(b.chunks_per_batch)]
    return WorkloadSpec(TaskProgram.standard(kernel), inputs)


def run_cell(config: RunConfig, profile: WorkloadProfile, batch: int, devices: int, mode: str) -> LatencyBreakdown:
    platform = build_platform(config)
    controller = SecurityController.boot_bundle(platform, boot_bundle(config))
    spec = batch_workload(config, profile, batch)
    if mode == Mode.BASELINE.value:
        result = run_direct_insecure(platform, platform.host, devices, spec)
    else:
        channel = LocalChannel(controller)
        session = attest_and_connect(
            channel,
            controller.identity.public_key,
            controller.measurement.digest,
            ConfigBody(config.controller.accel_type, devices, Priority.NORMAL),
            rng=random.Random(platform.rng.getrandbits(64)),
            costs=config.costs,
            nonce_log=platform.nonce_log,
        )
        result = submit_workload(session, spec)
    return LatencyBreakdown.from_timestamps(result.timestamps)


def run_experiment(config: RunConfig) -> ThroughputReport:
    config.validate()
    table = _profiles(config)
    b = config.bench
    modes = [m for m in (Mode.BASELINE.value, Mode.HETEE.value) if m in b.modes]
    report = ThroughputReport(list(b.profiles), list(b.batch_sizes), list(b.device_counts), modes)
    for name in b.profiles:
        for batch in b.batch_sizes:
            # the normalization reference is always measured
            cells = {(1, Mode.BASELINE.value)}
            cells |= {(d, m) for d in b.device_counts for m in modes}
            for devices, mode in sorted(cells):
                report.breakdowns[(name, batch, devices, mode)] = run_cell(config, table[name], batch, devices, mode)
    return report


def compare_modes(report: ThroughputReport, profile: str, batch: int, devices: int, config: RunConfig | None = None) -> OverheadRatio:
    """Hetee total over baseline total for one cell."""
    h = report.total_ns((profile, batch, devices, Mode.HETEE.value))
    base = report.total_ns((profile, batch, devices, Mode.BASELINE.value))
    costs = asdict((config or RunConfig()).costs)
    if config is not None:
        costs["fabric"] = asdict(config.fabric)
    return OverheadRatio(h / base, h, base, costs)


# -- reports -----------------------------------------------------------------

THROUGHPUT_FILE = "throughput.csv"
BREAKDOWN_FILE = "breakdown.csv"
BREAKDOWN_STREAM = "breakdown.jsonl"
BREAKDOWN_HEADER = ["model", "batch", "devices", "mode", *(f"{c}_ns" for c in COMPONENTS), "total_ns"]


def throughput_header(batch_sizes: Iterable[int], device_counts: Iterable[int]) -> list[str]:
    device_counts = list(device_counts)
    return ["model", "mode"] + [f"b{b}_{d}dev" for b in batch_sizes for d in device_counts]


def _fmt(x: float) -> str:
    return repr(float(x))


def render_throughput(report: ThroughputReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(throughput_header(report.batch_sizes, report.device_counts))
    for p in report.profiles:
        for m in report.modes:
            keys = [(p, b, d, m) for b in report.batch_sizes for d in report.device_counts]
            if not any(k in report.breakdowns for k in keys):
                continue
            w.writerow([p, m] + [_fmt(report.normalized(k)) if k in report.breakdowns else "" for k in keys])
    if report.breakdowns:
        out.write(f"# {REFERENCE_LABEL}: " + json.dumps(REFERENCE_CONSTANTS, sort_keys=True) + "\n")
    return out.getvalue()


def render_breakdown(report: ThroughputReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(BREAKDOWN_HEADER)
    for key in sorted(report.breakdowns):
        bd = report.breakdowns[key]
        w.writerow([*key, *bd.components().values(), bd.total])
    return out.getvalue()


def render_stream(report: ThroughputReport) -> str:
    lines = []
    for key in sorted(report.breakdowns):
        bd = report.breakdowns[key]
        rec = {"model": key[0], "batch": key[1], "devices": key[2], "mode": key[3]}
        rec.update({f"{c}_us": v for c, v in bd.components_us().items()})
        rec["total_us"] = bd.total_us
        rec["normalized_throughput"] = report.normalized(key) if (key[0], key[1], 1, "baseline") in report.breakdowns else None
        lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def emit_report(report: ThroughputReport, path: str | Path) -> list[Path]:
    """Write the grid, the breakdown table and the breakdown stream into ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = {
        THROUGHPUT_FILE: render_throughput(report),
        BREAKDOWN_FILE: render_breakdown(report),
        BREAKDOWN_STREAM: render_stream(report),
    }
    written = []
    for name, text in files.items():
        (root / name).write_text(text)
        written.append(root / name)
    return written


def parse_report(path: str | Path) -> ThroughputReport:
    root = Path(path)
    grid = [r for r in csv.reader((root / THROUGHPUT_FILE).read_text().splitlines()) if r and not r[0].startswith("#")]
    header = grid[0]
    batches: list[int] = []
    devices: list[int] = []
    for col in header[2:]:
        b, d = col[1:].removesuffix("dev").split("_")
        if int(b) not in batches:
            batches.append(int(b))
        if int(d) not in devices:
            devices.append(int(d))
    profiles: list[str] = []
    modes: list[str] = []
    for row in grid[1:]:
        if row[0] not in profiles:
            profiles.append(row[0])
        if row[1] not in modes:
            modes.append(row[1])
    report = ThroughputReport(profiles, batches, devices, modes)
    rows = list(csv.reader((root / BREAKDOWN_FILE).read_text().splitlines()))
    if rows[0] != BREAKDOWN_HEADER:
        raise ValueError(f"unexpected breakdown header {rows[0]}")
    for row in rows[1:]:
        key = (row[0], int(row[1]), int(row[2]), row[3])
        nums = [int(x) for x in row[4:]]
        report.breakdowns[key] = LatencyBreakdown(*nums[:-1], total=nums[-1])
    return report
