import itertools
import random

import pytest

from hetee_sim.accel import MatMul, Synthetic
from hetee_sim.audit import EventKind, cleanup_precedes_switches
from hetee_sim.config import RunConfig
from hetee_sim.controller import EnclaveStatus, ReorderBuffer, SecurityController
from hetee_sim.errors import (
    AccessDenied,
    BootSignatureInvalid,
    CommandAlreadyActive,
    EnclaveNotRunning,
    ProgramInvalid,
    UnknownTask,
)
from hetee_sim.fabric import World
from hetee_sim.host import submit_workload
from hetee_sim.program import Instr, Op, TaskProgram
from hetee_sim.protocol import CommandBody, ConfigBody, DataBody, Priority
from hetee_sim.sim import boot_bundle, build_platform

import checks
from conftest import connect, make_controller, matmul_workload


def worlds(ctrl):
    return {ep.id: ctrl.fabric.table.world(ep) for ep in ctrl.fabric.devices}


class TestBoot:
    def test_measurement_matches_images(self, controller, bundle):
        from hetee_sim.attest import measure_boot

        assert controller.measurement == measure_boot(bundle.firmware, bundle.system_sw)

    def test_reboot_is_stable(self, bundle):
        a = SecurityController.boot_bundle(build_platform(), bundle)
        b = SecurityController.boot_bundle(build_platform(), bundle)
        assert a.measurement == b.measurement

    def test_stale_signature(self, platform, bundle):
        with pytest.raises(BootSignatureInvalid):
            SecurityController.boot(
                platform,
                bundle.firmware,
                bundle.firmware_sig,
                bundle.system_sw + b" patched",
                bundle.system_sw_sig,
                bundle.identity,
                bundle.vendor_pubkey,
            )

    def test_devices_start_insecure(self, controller):
        assert set(worlds(controller).values()) == {World.INSECURE}
        assert len(controller.fabric.enumerate(controller.platform.host)) == 4

    def test_management_port_taken(self, controller):
        from hetee_sim.errors import InvalidToken

        with pytest.raises(InvalidToken):
            controller.fabric.claim_management_port()


class TestConfiguration:
    def test_first_task_id_is_one(self, controller):
        s = connect(controller)
        assert (s.task_id, s.queue_id) == (1, 1)
        assert s.ready and s.devices == 1

    def test_two_sessions_distinct(self, controller):
        a, b = connect(controller, seed=1), connect(controller, seed=2)
        assert a.task_id != b.task_id and a.queue_id != b.queue_id

    def test_claim_switches_world_after_cleanup(self, controller):
        connect(controller, count=2)
        events = [(e.kind, e.device) for e in controller.audit.ordered() if e.device]
        assert events[:4] == [
            (EventKind.CLEANUP, "gpu0"),
            (EventKind.WORLD_SWITCH, "gpu0"),
            (EventKind.CLEANUP, "gpu1"),
            (EventKind.WORLD_SWITCH, "gpu1"),
        ]
        assert worlds(controller)["gpu0"] is World.SECURE

    def test_busy_pool_high_preempts_once(self, controller):
        for dev in controller.devices.values():
            dev.occupy(999)
        connect(controller, count=1, priority=Priority.HIGH)
        pre = controller.audit.of_kind(EventKind.PREEMPTION)
        assert len(pre) == 1 and pre[0].detail["victim"] == "host"
        assert controller.devices[pre[0].device].in_flight is None

    def test_normal_waits_when_all_busy(self, controller):
        for dev in controller.devices.values():
            dev.occupy(999)
        s = connect(controller)
        assert not s.ready
        controller.devices["gpu2"].halt()
        controller.reschedule()
        assert s.refresh()

    def test_resource_exhausted_without_waiting(self):
        ctrl = make_controller(controller={"wait_for_devices": False})
        for dev in ctrl.devices.values():
            dev.occupy(1)
        from hetee_sim.errors import HostError

        with pytest.raises(HostError):
            connect(ctrl)
        assert ctrl.fabric.queues() == []

    def test_high_preempts_normal_enclave(self, controller):
        low = connect(controller, count=4, seed=1)
        assert low.devices == 4
        connect(controller, count=1, priority=Priority.HIGH, seed=2)
        pre = controller.audit.of_kind(EventKind.PREEMPTION)
        assert [e.detail["victim"] for e in pre] == [low.task_id]
        switch = controller.audit.of_kind(EventKind.TASK_SWITCH)[-1]
        assert switch.device == pre[0].device
        assert low.refresh() and low.devices == 3


class TestCommand:
    def _enclave(self, controller):
        s = connect(controller)
        return s, controller.enclave(s.task_id)

    def test_standard_program_runs(self, controller):
        _, enc = self._enclave(controller)
        controller.handle_command_task(enc, CommandBody(TaskProgram.standard(MatMul(2, 2, 2))))
        assert enc.status is EnclaveStatus.RUNNING

    def test_second_command_rejected(self, controller):
        _, enc = self._enclave(controller)
        body = CommandBody(TaskProgram.standard(MatMul(2, 2, 2)))
        controller.handle_command_task(enc, body)
        with pytest.raises(CommandAlreadyActive):
            controller.handle_command_task(enc, body)

    def test_copy_before_alloc(self, controller):
        _, enc = self._enclave(controller)
        k = MatMul(2, 2, 2)
        prog = TaskProgram(
            (
                Instr(Op.INIT_DEVICE),
                Instr(Op.COPY_TO_DEVICE),
                Instr(Op.ALLOC_DEVICE_BUFFER, nbytes=1024),
                Instr(Op.GET_INPUT),
                Instr(Op.LAUNCH_KERNEL, kernel=k),
                Instr(Op.COPY_FROM_DEVICE),
                Instr(Op.PUT_OUTPUT),
                Instr(Op.LOOP_UNTIL_DRAINED),
            )
        )
        with pytest.raises(ProgramInvalid):
            controller.handle_command_task(enc, CommandBody(prog))
        assert enc.status is EnclaveStatus.AWAITING_COMMAND

    def test_data_before_command(self, controller):
        _, enc = self._enclave(controller)
        with pytest.raises(EnclaveNotRunning):
            controller.handle_data_task(enc, DataBody(b"x"))

    def test_data_to_closed_enclave(self, controller):
        s, enc = self._enclave(controller)
        s.close()
        with pytest.raises(EnclaveNotRunning):
            controller.handle_data_task(enc, DataBody(b"x"))
        with pytest.raises(EnclaveNotRunning):
            controller.handle_command_task(enc, CommandBody(TaskProgram.standard(MatMul(1, 1, 1))))

    def test_unknown_task(self, controller):
        with pytest.raises(UnknownTask):
            controller.enclave(42)


class TestProgramInvalidShapes:
    @pytest.mark.parametrize(
        "ops",
        [
            [],
            [Op.GET_INPUT],
            [Op.INIT_DEVICE, Op.ALLOC_DEVICE_BUFFER, Op.GET_INPUT, Op.LAUNCH_KERNEL, Op.COPY_TO_DEVICE,
             Op.COPY_FROM_DEVICE, Op.PUT_OUTPUT, Op.LOOP_UNTIL_DRAINED],
            [Op.INIT_DEVICE, Op.ALLOC_DEVICE_BUFFER, Op.GET_INPUT, Op.COPY_TO_DEVICE, Op.LAUNCH_KERNEL,
             Op.COPY_FROM_DEVICE, Op.PUT_OUTPUT],
            [Op.INIT_DEVICE, Op.INIT_DEVICE, Op.ALLOC_DEVICE_BUFFER, Op.GET_INPUT, Op.COPY_TO_DEVICE,
             Op.LAUNCH_KERNEL, Op.COPY_FROM_DEVICE, Op.PUT_OUTPUT, Op.LOOP_UNTIL_DRAINED],
        ],
    )
    def test_rejected(self, ops):
        k = MatMul(2, 2, 2)
        prog = TaskProgram(
            tuple(
                Instr(op, nbytes=4096 if op is Op.ALLOC_DEVICE_BUFFER else None,
                      kernel=k if op is Op.LAUNCH_KERNEL else None)
                for op in ops
            )
        )
        with pytest.raises(ProgramInvalid):
            prog.validate()

    def test_buffer_too_small(self):
        with pytest.raises(ProgramInvalid):
            TaskProgram.standard(MatMul(4, 4, 4), buffer_bytes=8).validate()

    def test_json_round_trip(self):
        prog = TaskProgram.standard(Synthetic(100, 8, 4))
        assert TaskProgram.from_json(prog.to_json()) == prog


class TestReorderBuffer:
    def test_every_completion_order_of_four(self):
        for order in itertools.permutations(range(4)):
            rb = ReorderBuffer()
            released = []
            for i in order:
                released += rb.push(i, f"c{i}".encode())
            assert released == [b"c0", b"c1", b"c2", b"c3"]
            assert rb.waiting == 0

    def test_duplicate(self):
        rb = ReorderBuffer()
        rb.push(0, b"a")
        with pytest.raises(ValueError):
            rb.push(0, b"a")

    def test_two_devices_keep_input_order(self, controller):
        s = connect(controller, count=2)
        spec = matmul_workload(3, 3, 3, chunks=4, seed=3)
        from hetee_sim.host import local_outputs

        assert submit_workload(s, spec).outputs == local_outputs(spec)


class TestResults:
    def test_single_chunk_product(self, controller):
        s = connect(controller)
        spec = matmul_workload(2, 3, 2, chunks=1)
        from oracles import naive_matmul, unpack_matrix
        import struct

        flat = struct.unpack("<12q", spec.inputs[0])
        a = [list(flat[0:3]), list(flat[3:6])]
        b = [list(flat[6:8]), list(flat[8:10]), list(flat[10:12])]
        out = submit_workload(s, spec).outputs[0]
        assert unpack_matrix(out, 2, 2) == naive_matmul(a, b)

    def test_results_strictly_increasing_seq(self, controller):
        from hetee_sim.protocol import parse_envelope

        s = connect(controller, count=2)
        submit_workload(s, matmul_workload(2, 2, 2, chunks=5))
        seqs = [parse_envelope(t.data).seq for t in controller.fabric.tap if t.direction == "to_host"]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)

    def test_send_seq_matches_controller_counter(self, controller):
        s = connect(controller)
        submit_workload(s, matmul_workload(2, 2, 2, chunks=3))
        enc = controller.enclave(s.task_id)
        assert s.send_seq == enc.queue.next_seq_in
        assert s.recv_seq == enc.queue.next_seq_out

    def test_devices_released_after_drain(self, controller):
        s = connect(controller, count=2)
        submit_workload(s, matmul_workload(2, 2, 2, chunks=2))
        enc = controller.enclave(s.task_id)
        assert enc.devices == []
        residual = [d.residual_regions() for d in controller.devices.values()]
        assert all(not r for r in residual)


class TestIsolation:
    def test_cross_enclave_read_denied(self, controller):
        a, b = connect(controller, seed=1), connect(controller, seed=2)
        with pytest.raises(AccessDenied):
            controller.read_buffer(a.task_id, b.task_id)
        assert controller.read_buffer(a.task_id, a.task_id) == b""

    def test_host_never_sees_held_devices(self, controller):
        s = connect(controller, count=3)
        held = set(controller.enclave(s.task_id).devices)
        view = {ep.id for ep in controller.fabric.enumerate(controller.platform.host)}
        assert held and not held & view
        assert len(view) == 1

    def test_secure_to_insecure_leaves_nothing(self, controller):
        s = connect(controller, count=1)
        submit_workload(s, matmul_workload(2, 2, 2, chunks=1))
        s.close()
        granted = controller.request_host_release(controller.platform.host, 1)
        assert granted == 1
        ev = controller.audit.of_kind(EventKind.WORLD_SWITCH)[-1]
        assert ev.detail["new"] == "insecure"
        assert controller.devices[ev.device].inspect_residual() == frozenset()

    def test_switch_without_kernel_still_cleans(self, controller):
        controller.switch_world("gpu3", World.SECURE, "test")
        controller.switch_world("gpu3", World.INSECURE, "test")
        kinds = [e.kind for e in controller.audit.for_device("gpu3")]
        assert kinds == [EventKind.CLEANUP, EventKind.WORLD_SWITCH] * 2

    def test_randomized_run(self):
        stats = checks.isolation_run(seed=3, switches=200)
        assert stats["switches"] >= 200 and stats["denied_reads"] > 0

    def test_cleanup_precedes_every_switch(self, controller):
        for dev in controller.devices.values():
            dev.occupy(5)
        sessions = [connect(controller, count=2, priority=p, seed=i)
                    for i, p in enumerate([Priority.NORMAL, Priority.HIGH, Priority.HIGH])]
        for s in sessions:
            s.close()
        controller.request_host_release(controller.platform.host, 4)
        assert cleanup_precedes_switches(controller.audit.ordered()) == []


class TestDeterminism:
    def _trace(self):
        ctrl = make_controller(RunConfig(seed=5))
        for seed, count in enumerate((2, 1, 3)):
            s = connect(ctrl, count=count, seed=seed)
            if s.ready:
                submit_workload(s, matmul_workload(2, 2, 2, chunks=3, seed=seed))
            s.close()
        return ctrl.export_audit()

    def test_identical_audit_logs(self):
        a, b = self._trace(), self._trace()
        assert a == b and a.count("\n") > 5

    def test_random_runs_repeat(self):
        a = checks.isolation_run(seed=9, switches=60)["audit"]
        b = checks.isolation_run(seed=9, switches=60)["audit"]
        assert a == b


class TestMalformedInput:
    def test_garbage_frames_are_dropped_silently(self, controller):
        s = connect(controller)
        controller.fabric.window_write(controller.platform.host, s.queue_id, b"nonsense")
        controller.process()
        assert controller.metrics["dropped_frames"] >= 1
        assert controller.fabric.window_read(controller.platform.host, s.queue_id) == []

    def test_control_garbage(self, controller):
        sess = controller.open_channel(controller.platform.host)
        assert controller.handle_control_frame(sess, b"\x00" * 100) == []

    def test_random_frames_never_crash(self, controller):
        rng = random.Random(1)
        s = connect(controller)
        for _ in range(200):
            controller.fabric.window_write(controller.platform.host, s.queue_id, rng.randbytes(rng.randrange(0, 120)))
        controller.process()
        assert controller.enclave(s.task_id).status is EnclaveStatus.AWAITING_COMMAND
