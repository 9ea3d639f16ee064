import sys

import numpy as np
import pytest

from gatgpt.backbone import ModelConfig, init_model
from gatgpt.synthetic import make_ring_fixture


@pytest.fixture(scope="session")
def ring():
    """Default 8-node, 2000-step synthetic fixture: (tensor, distances, adjacency)."""
    return make_ring_fixture()


@pytest.fixture(scope="session")
def small_ring():
    return make_ring_fixture(n_nodes=4, n_steps=240, seed=3)


@pytest.fixture
def tiny_params():
    cfg = ModelConfig(c_in=1, d_model=16, n_layers=2, n_heads=2, gat_heads=2)
    return init_model(cfg, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
