import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from sdanet import networks as nw
from sdanet import pipelines as pl
from sdanet.benchmark.phantoms import PhantomConfig, ShiftConfig, gen_phantom_dataset, shift_subject

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


@pytest.fixture(scope="session")
def tiny_data():
    """Small segmentation set: 2 train, 1 val, 1 target subject, 4 slices each."""
    cfg = PhantomConfig(seed=11)
    subs = gen_phantom_dataset(cfg, 4, 4)
    target = shift_subject(subs[3], ShiftConfig(gamma=1.8), seed=5)
    return subs[:2], subs[2:3], target


@pytest.fixture(scope="session")
def tiny_models(tiny_data):
    """Briefly trained task network and AE bank; enough for contract tests."""
    train, val, _ = tiny_data
    cfg = pl.TrainConfig(task=nw.SEGMENTATION, epochs=2, ae_epochs=2, seed=3)
    weights, _ = pl.train_task(train, val, cfg, n_out=5)
    bank, _ = pl.train_autoencoders(weights, train, cfg)
    return weights, bank, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
