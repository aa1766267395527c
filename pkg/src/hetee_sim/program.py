"""Declarative controller-side programs carried by command tasks.

A program is the fixed loop a controller process runs over its input
buffer: initialise the devices, allocate device buffers, then repeatedly
Get -> CopyToDevice -> LaunchKernel -> CopyFromDevice -> Put until the input
stream is drained.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any

from .accel import KernelKind, MatMul, Synthetic
from .errors import ProgramInvalid


class Op(enum.Enum):
    INIT_DEVICE = "InitDevice"
    ALLOC_DEVICE_BUFFER = "AllocDeviceBuffer"
    GET_INPUT = "GetInput"
    COPY_TO_DEVICE = "CopyToDevice"
    LAUNCH_KERNEL = "LaunchKernel"
    COPY_FROM_DEVICE = "CopyFromDevice"
    PUT_OUTPUT = "PutOutput"
    LOOP_UNTIL_DRAINED = "LoopUntilDrained"


LOOP_BODY = (Op.GET_INPUT, Op.COPY_TO_DEVICE, Op.LAUNCH_KERNEL, Op.COPY_FROM_DEVICE, Op.PUT_OUTPUT)


@dataclass(frozen=True)
class Instr:
    op: Op
    nbytes: int | None = None
    kernel: KernelKind | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"op": self.op.value}
        if self.nbytes is not None:
            out["bytes"] = self.nbytes
        if self.kernel is not None:
            out["kernel"] = kernel_to_json(self.kernel)
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Instr":
        op = Op(obj["op"])
        kernel = kernel_from_json(obj["kernel"]) if "kernel" in obj else None
        return cls(op, obj.get("bytes"), kernel)


def kernel_to_json(kernel: KernelKind) -> dict[str, Any]:
    if isinstance(kernel, MatMul):
        return {"kind": "MatMul", "n": kernel.n, "m": kernel.m, "k": kernel.k}
    return {
        "kind": "Synthetic",
        "flops": kernel.flops,
        "in_bytes": kernel.in_bytes,
        "out_bytes": kernel.out_bytes,
    }


def kernel_from_json(obj: dict[str, Any]) -> KernelKind:
    kind = obj.get("kind")
    if kind == "MatMul":
        return MatMul(int(obj["n"]), int(obj["m"]), int(obj["k"]))
    if kind == "Synthetic":
        return Synthetic(int(obj["flops"]), int(obj["in_bytes"]), int(obj["out_bytes"]))
    raise ValueError(f"unknown kernel kind {kind!r}")


@dataclass(frozen=True)
class TaskProgram:
    instructions: tuple[Instr, ...]

    @classmethod
    def standard(cls, kernel: KernelKind, buffer_bytes: int | None = None) -> "TaskProgram":
        """The canonical init/alloc prologue followed by the five-step loop."""
        nbytes = buffer_bytes if buffer_bytes is not None else kernel.in_bytes + kernel.out_bytes
        return cls(
            (
                Instr(Op.INIT_DEVICE),
                Instr(Op.ALLOC_DEVICE_BUFFER, nbytes=nbytes),
                Instr(Op.GET_INPUT),
                Instr(Op.COPY_TO_DEVICE),
                Instr(Op.LAUNCH_KERNEL, kernel=kernel),
                Instr(Op.COPY_FROM_DEVICE),
                Instr(Op.PUT_OUTPUT),
                Instr(Op.LOOP_UNTIL_DRAINED),
            )
        )

    @property
    def kernel(self) -> KernelKind:
        return next(i.kernel for i in self.instructions if i.op is Op.LAUNCH_KERNEL)

    @property
    def buffer_bytes(self) -> int:
        return sum(i.nbytes or 0 for i in self.instructions if i.op is Op.ALLOC_DEVICE_BUFFER)

    def validate(self) -> None:
        ins = list(self.instructions)
        if not ins or ins[0].op is not Op.INIT_DEVICE:
            raise ProgramInvalid("program must start with InitDevice")
        pos = 1
        allocated = 0
        while pos < len(ins) and ins[pos].op is Op.ALLOC_DEVICE_BUFFER:
            if not isinstance(ins[pos].nbytes, int) or ins[pos].nbytes <= 0:
                raise ProgramInvalid("AllocDeviceBuffer needs a positive byte count")
            allocated += ins[pos].nbytes
            pos += 1
        if allocated == 0:
            first = ins[pos].op.value if pos < len(ins) else "end of program"
            raise ProgramInvalid(f"{first} before AllocDeviceBuffer")
        body = [i.op for i in ins[pos : pos + len(LOOP_BODY)]]
        if tuple(body) != LOOP_BODY:
            raise ProgramInvalid(
                "loop body must be " + " -> ".join(op.value for op in LOOP_BODY)
            )
        launch = ins[pos + 2]
        if launch.kernel is None:
            raise ProgramInvalid("LaunchKernel without a kernel")
        for i in ins[1:]:
            if i.op is Op.INIT_DEVICE:
                raise ProgramInvalid("InitDevice may only appear once")
        tail = ins[pos + len(LOOP_BODY) :]
        if [i.op for i in tail] != [Op.LOOP_UNTIL_DRAINED]:
            raise ProgramInvalid("program must end with a single LoopUntilDrained")
        need = launch.kernel.in_bytes + launch.kernel.out_bytes
        if allocated < need:
            raise ProgramInvalid(f"device buffers hold {allocated} bytes, kernel needs {need}")

    def to_json(self) -> list[dict[str, Any]]:
        return [i.to_json() for i in self.instructions]

    @classmethod
    def from_json(cls, items: list[dict[str, Any]]) -> "TaskProgram":
        return cls(tuple(Instr.from_json(i) for i in items))
