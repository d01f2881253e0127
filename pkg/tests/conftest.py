import numpy as np
import pytest
import torch

from mepois import numcore as nc
from mepois.geodata import WorldConfig, generate_world


@pytest.fixture
def f64():
    with nc.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_WORLD = dict(poi_count=120, device_count=40, duration_days=7, neighborhood_count=6, seed=3)


@pytest.fixture(scope="session")
def small_cfg():
    return WorldConfig(**SMALL_WORLD)


@pytest.fixture(scope="session")
def small_world(small_cfg):
    return generate_world(small_cfg)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def small_corpus(small_cfg):
    from mepois.experiments import build_corpus
    return build_corpus(small_cfg, m_visits=15)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
