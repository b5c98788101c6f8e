import time

import pytest

from pathcal.config import RunConfig
from pathcal.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Default desk-scale pipeline runs, created on first use and shared.

    ``desk_runs(mode, seed)`` returns ``(run_dir, seconds)``.
    """
    from pathcal.pipeline import run_pipeline

    root = tmp_path_factory.mktemp("desk")
    cache = {}

    def get(mode: str = "kep", seed: int = 0):
        if (mode, seed) not in cache:
            out = root / f"{mode}-{seed}"
            t0 = time.perf_counter()
            run_pipeline(RunConfig(backbone_mode=mode, seed=seed), out)
            cache[mode, seed] = (out, time.perf_counter() - t0)
        return cache[mode, seed]

    return get


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
