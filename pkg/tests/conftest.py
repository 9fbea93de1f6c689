import time

import pytest

from calteacher.pseudo_labeling import PipelineConfig
from calteacher.simulator import SimConfig, run_training_loop

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

ACCEPTANCE_ITERATIONS = 30000
DRIFT_RATE = -2e-5


def _timed_run(sim: SimConfig):
    t0 = time.perf_counter()
    report = run_training_loop(sim, PipelineConfig(), ACCEPTANCE_ITERATIONS, 500)
    return report, time.perf_counter() - t0


@pytest.fixture(scope="session")
def zero_drift_run():
    """The 30k-iteration run with warp (2.5, -1), T=500, L=8000 and no drift."""
    return _timed_run(SimConfig(seed=0))


@pytest.fixture(scope="session")
def drift_run():
    return _timed_run(SimConfig(seed=0, drift_rate=DRIFT_RATE))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
