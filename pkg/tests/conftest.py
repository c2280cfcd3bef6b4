import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mspquant.admm import TrainConfig, train, train_float
from mspquant.core import mlp
from mspquant.data import train_test, write_synth_idx

settings.register_profile(
    "repo", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

# criterion number -> (passed, name, detail); filled by test_acceptance.py
ACCEPTANCE = {}
# wall-clock seconds of expensive session fixtures
TIMINGS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {name} ({detail})")


@pytest.fixture(scope="session")
def moons():
    return train_test("moons", 1000, 500, 7)


@pytest.fixture(scope="session")
def moons_run(moons):
    """Float baseline and 4-bit MSP ADMM run on moons, MLP 2-16-16-2, seed 7, 150 epochs."""
    tr, te = moons
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=150, seed=7)
    base = train_float(mlp([2, 16, 16, 2], 7), tr, cfg, te)
    res = train(base.net, tr, cfg, te)
    TIMINGS["moons_run"] = time.perf_counter() - t0
    return base, res, cfg


@pytest.fixture(scope="session")
def idx_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("idx")
    write_synth_idx(d, 2000, seed=1, prefix="t10k")
    write_synth_idx(d, 3000, seed=2, prefix="train")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
