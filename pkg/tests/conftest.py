import logging
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from seedgrow.net import TrainConfig, train
from seedgrow.phantom import PhantomConfig, generate_case
from seedgrow.workflow import RunConfig, case_stack, run_pipeline


@pytest.fixture(scope="session")
def noiseless_cases():
    cfg = PhantomConfig(noise_sigma=0.0, rng_seed=11)
    return [generate_case(cfg, i) for i in range(3)]


@pytest.fixture(scope="session")
def small_trained(noiseless_cases):
    """Network trained for the desk-default 4000 iterations on two
    noiseless phantoms (third phantom for validation)."""
    stacks = [case_stack(c) for c in noiseless_cases]
    t0 = time.perf_counter()
    model = train(stacks[:2], stacks[2:], TrainConfig(seed=5), init_seed=7)
    model.seconds = time.perf_counter() - t0
    return model


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The desk-scale pipeline with default settings, run once."""
    logging.getLogger("seedgrow").setLevel(logging.INFO)
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    res = run_pipeline(RunConfig(), out, threads=os.cpu_count() or 1)
    res.timings["total_s"] = time.perf_counter() - t0
    res.out_dir = out
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


@contextmanager
def _criterion(number: int, title: str):
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException:
        info["seconds"] = round(time.perf_counter() - t0, 1)
        ACCEPTANCE[number] = ("FAIL", title, info)
        raise
    info["seconds"] = round(time.perf_counter() - t0, 1)
    ACCEPTANCE[number] = ("PASS", title, info)


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion's outcome."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, info = ACCEPTANCE[n]
        details = ", ".join(f"{k}={v}" for k, v in info.items())
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title} ({details})")
