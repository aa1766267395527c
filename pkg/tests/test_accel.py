import itertools
import random
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetee_sim.accel import (
    ALL_REGIONS,
    API_CTX_DESTROY,
    API_DEVICE_RESET,
    COLD_REBOOT,
    SOFTWARE_REBOOT,
    TRUSTED_COMPOSITE,
    AcceleratorDevice,
    CleanupKind,
    CleanupMethod,
    DeviceProfile,
    KernelSpec,
    MatMul,
    Region,
    Synthetic,
    load_cost_table,
    run_kernel,
)
from hetee_sim.errors import DeviceBusy, ShapeMismatch

from oracles import ResidualModel, naive_matmul, pack_matrices, unpack_matrix, wrap64

METHODS = {
    "ApiDeviceReset": API_DEVICE_RESET,
    "ApiCtxDestroy": API_CTX_DESTROY,
    "SoftwareReboot": SOFTWARE_REBOOT,
    "ColdReboot": COLD_REBOOT,
    "TrustedComposite": TRUSTED_COMPOSITE,
}


class TestCostTable:
    def test_method_costs(self):
        t = load_cost_table()
        assert t.method_ms[CleanupKind.API_DEVICE_RESET] == Decimal("71")
        assert t.method_ms[CleanupKind.API_CTX_DESTROY] == Decimal("53")
        assert t.method_ms[CleanupKind.SOFTWARE_REBOOT] == Decimal("975")
        assert t.method_ns[CleanupKind.API_DEVICE_RESET] == 71_000_000

    def test_region_costs(self):
        t = load_cost_table()
        expected = {
            Region.REGISTERS: "0.019",
            Region.LOCAL_MEM: "50",
            Region.SHARED_MEM: "0.020",
            Region.GLOBAL_MEM: "44",
            Region.L1_CACHE: "0.019",
            Region.L2_CACHE: "0.040",
        }
        assert t.region_ms == {r: Decimal(v) for r, v in expected.items()}

    def test_region_sizes(self):
        sizes = load_cost_table().region_sizes
        assert sizes[Region.REGISTERS] == 24 * 65536 * 4
        assert sizes[Region.LOCAL_MEM] == 24 * 1024 * 512 * 1024
        assert sizes[Region.SHARED_MEM] == 24 * 96 * 1024
        assert sizes[Region.GLOBAL_MEM] == 12 * 1024**3
        assert sizes[Region.L1_CACHE] == 24 * 48 * 1024
        assert sizes[Region.L2_CACHE] == 3 * 1024**2

    def test_composite_cost(self):
        dev = AcceleratorDevice("d0")
        r1 = dev.reset_to_trusted_state()
        assert r1.elapsed_ns == 165_098_000
        assert r1.elapsed_ms == pytest.approx(165.098)

    def test_cold_reboot_configurable(self):
        dev = AcceleratorDevice("d0", DeviceProfile(cold_reboot_ms=5))
        assert dev.cleanup(COLD_REBOOT).elapsed_ns == 5_000_000
        assert AcceleratorDevice("d1").cleanup(COLD_REBOOT).elapsed_ns == 120_000_000_000


class TestCleanupMethod:
    def test_code_clean_needs_regions(self):
        with pytest.raises(ValueError):
            CleanupMethod(CleanupKind.CODE_CLEAN)

    def test_fixed_methods_take_no_regions(self):
        with pytest.raises(ValueError):
            CleanupMethod(CleanupKind.API_DEVICE_RESET, frozenset({Region.L1_CACHE}))

    def test_code_clean_cost_is_sum(self):
        dev = AcceleratorDevice("d0")
        rep = dev.cleanup(CleanupMethod.code_clean(Region.REGISTERS, Region.L2_CACHE))
        assert rep.elapsed_ns == 19_000 + 40_000


class TestResidual:
    def test_composite_after_kernel(self):
        dev = AcceleratorDevice("d0")
        dev.execute_kernel(KernelSpec(Synthetic(10, 8, 8), 7), b"\0" * 8)
        assert dev.residual_regions() == ALL_REGIONS
        rep = dev.reset_to_trusted_state()
        assert rep.residual == frozenset()
        assert dev.trusted

    def test_composite_idempotent(self):
        dev = AcceleratorDevice("d0")
        dev.execute_kernel(KernelSpec(Synthetic(10, 8, 8), 1), b"\0" * 8)
        a = dev.reset_to_trusted_state()
        b = dev.reset_to_trusted_state()
        assert a.residual == b.residual == frozenset()
        assert a.elapsed_ns == b.elapsed_ns

    def test_software_reboot_keeps_caches(self):
        dev = AcceleratorDevice("d0")
        dev.execute_kernel(KernelSpec(Synthetic(10, 8, 8), 1), b"\0" * 8)
        assert dev.cleanup(SOFTWARE_REBOOT).residual == {Region.L1_CACHE, Region.L2_CACHE}
        assert not dev.trusted

    def test_api_reset_only_removes_current_task(self):
        dev = AcceleratorDevice("d0")
        dev.execute_kernel(KernelSpec(Synthetic(10, 8, 8), 1), b"\0" * 8)
        dev.execute_kernel(KernelSpec(Synthetic(10, 8, 8), 2, frozenset({Region.GLOBAL_MEM})), b"\0" * 8)
        dev.cleanup(API_DEVICE_RESET)
        assert dev.inspect_residual() == {(r, 1) for r in Region}

    def test_halt_then_cleanup(self):
        dev = AcceleratorDevice("d0")
        dev.occupy(99)
        with pytest.raises(DeviceBusy):
            dev.cleanup(TRUSTED_COMPOSITE)
        with pytest.raises(DeviceBusy):
            dev.execute_kernel(KernelSpec(Synthetic(1, 1, 1), 1), b"\0")
        assert dev.reset_to_trusted_state().residual == frozenset()
        assert dev.in_flight is None

    def test_random_sequences_match_model(self):
        rng = random.Random(11)
        names = list(METHODS) + ["CodeClean"]
        for _ in range(300):
            dev = AcceleratorDevice("d")
            model = ResidualModel()
            for _ in range(rng.randrange(1, 12)):
                if rng.random() < 0.5:
                    task = rng.randrange(1, 5)
                    touched = frozenset(rng.sample(list(Region), rng.randrange(1, 7)))
                    dev.execute_kernel(KernelSpec(Synthetic(5, 4, 4), task, touched), b"abcd")
                    model.run(task, [r.value for r in touched])
                else:
                    name = rng.choice(names)
                    if name == "CodeClean":
                        regions = rng.sample(list(Region), rng.randrange(1, 7))
                        method = CleanupMethod.code_clean(*regions)
                        model.cleanup(name, [r.value for r in regions])
                    else:
                        method = METHODS[name]
                        model.cleanup(name)
                    rep = dev.cleanup(method)
                    assert {r.value for r in rep.residual} == model.residual()
                assert {(r.value, t) for r, t in dev.inspect_residual()} == model.pairs()


class TestKernels:
    def test_matmul_exhaustive_small(self):
        # every 1x2 @ 2x1 over a small alphabet
        vals = (-2, 0, 1, 3)
        spec = MatMul(1, 2, 1)
        for a0, a1, b0, b1 in itertools.product(vals, repeat=4):
            a, b = [[a0, a1]], [[b0], [b1]]
            out = unpack_matrix(run_kernel(spec, pack_matrices(a, b)), 1, 1)
            assert out == naive_matmul(a, b)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.randoms(use_true_random=False))
    def test_matmul_matches_naive(self, n, m, k, rnd):
        a = [[rnd.randint(-1000, 1000) for _ in range(m)] for _ in range(n)]
        b = [[rnd.randint(-1000, 1000) for _ in range(k)] for _ in range(m)]
        out = unpack_matrix(run_kernel(MatMul(n, m, k), pack_matrices(a, b)), n, k)
        assert out == naive_matmul(a, b)

    def test_matmul_wraps_like_int64(self):
        big = 2**62
        a, b = [[big, big]], [[3], [1]]
        out = unpack_matrix(run_kernel(MatMul(1, 2, 1), pack_matrices(a, b)), 1, 1)
        assert out == [[wrap64(big * 3 + big)]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            run_kernel(MatMul(2, 2, 2), b"\0" * 8)

    def test_synthetic_is_keyed_digest(self):
        spec = Synthetic(100, 4, 32)
        assert run_kernel(spec, b"abcd") == run_kernel(spec, b"abcd")
        assert run_kernel(spec, b"abcd") != run_kernel(spec, b"abce")
        assert len(run_kernel(spec, b"abcd")) == 32

    def test_compute_time(self):
        dev = AcceleratorDevice("d0", DeviceProfile(compute_flops=10**9))
        res = dev.execute_kernel(KernelSpec(Synthetic(10**9, 1, 1), 1), b"x")
        assert res.elapsed_ms == 1000.0

    def test_device_timeline_is_sequential(self):
        dev = AcceleratorDevice("d0", DeviceProfile(compute_flops=10**9))
        a = dev.execute_kernel(KernelSpec(Synthetic(1000, 1, 1), 1), b"x", start_ns=0)
        b = dev.execute_kernel(KernelSpec(Synthetic(1000, 1, 1), 1), b"x", start_ns=0)
        assert b.start_ns == a.end_ns
        rep = dev.cleanup(API_CTX_DESTROY, start_ns=0)
        assert rep.start_ns == b.end_ns

    def test_bad_profile(self):
        with pytest.raises(ValueError):
            DeviceProfile(compute_flops=0)
