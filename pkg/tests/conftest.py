"""Session fixtures for the multi-minute training runs, and the acceptance summary."""

import time

import pytest

from fuseformer.imageio import synth_pairs
from fuseformer.training import TrainConfig, train_stage1

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


@pytest.fixture(scope="session")
def desk_pairs():
    """32 synthetic 32x32 pairs, i.e. 64 single-band images for stage 1."""
    return synth_pairs(32, 32, seed=0)


@pytest.fixture(scope="session")
def stage1_run(desk_pairs):
    started = time.perf_counter()
    weights, tlog = train_stage1(TrainConfig(stage="ae", epochs=200, seed=0), desk_pairs)
    return weights, tlog, time.perf_counter() - started


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
