import random

import numpy as np
import pytest

from hetee_sim.accel import MatMul
from hetee_sim.config import RunConfig
from hetee_sim.controller import SecurityController
from hetee_sim.host import LocalChannel, WorkloadSpec, attest_and_connect
from hetee_sim.program import TaskProgram
from hetee_sim.protocol import ConfigBody, Priority
from hetee_sim.sim import boot_bundle, build_platform


@pytest.fixture
def config():
    return RunConfig()


@pytest.fixture
def platform(config):
    return build_platform(config)


@pytest.fixture
def bundle(config):
    return boot_bundle(config)


@pytest.fixture
def controller(platform, bundle):
    return SecurityController.boot_bundle(platform, bundle)


def make_controller(config=None, **overrides):
    config = config or RunConfig()
    for section, values in overrides.items():
        for k, v in values.items():
            setattr(getattr(config, section), k, v)
    platform = build_platform(config)
    return SecurityController.boot_bundle(platform, boot_bundle(config))


def connect(controller, count=1, priority=Priority.NORMAL, seed=0, **kw):
    channel = LocalChannel(controller, **kw)
    return attest_and_connect(
        channel,
        controller.identity.public_key,
        controller.measurement.digest,
        ConfigBody("gpu", count, priority),
        rng=random.Random(seed),
        costs=controller.costs,
        nonce_log=controller.platform.nonce_log,
    )


def matmul_workload(n, m, k, chunks, seed=0, lo=-9, hi=9):
    rng = np.random.default_rng(seed)
    kernel = MatMul(n, m, k)
    inputs = [rng.integers(lo, hi + 1, size=n * m + m * k).astype("<i8").tobytes() for _ in range(chunks)]
    return WorkloadSpec(TaskProgram.standard(kernel), inputs)
