import os

import numpy as np
import pytest

from safeode import expert, pipeline


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """Full-size dataset generated with the default configuration."""
    out = str(tmp_path_factory.mktemp("data") / "default")
    manifest = expert.gen_dataset(out, expert.GenConfig(), workers=min(4, os.cpu_count() or 1))
    return out, manifest


@pytest.fixture(scope="session")
def trained(default_dataset):
    data = expert.load_dataset(default_dataset[0])
    res = pipeline.train(data, pipeline.TrainConfig())
    return data, res


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data") / "small")
    expert.gen_dataset(out, expert.GenConfig(n_init=4, steps=30, seed=3))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
