import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from reis_sim.datasets import make_clustered, make_documents
from reis_sim.ivf import KmeansParams, build_index
from reis_sim.layout import deploy_flat, deploy_ivf
from reis_sim.vectors import train_quantizer

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    """2000 clustered 256-d vectors plus 20 held-out queries."""
    x = make_clustered(2020, 256, 20, seed=11)
    return x[20:], x[:20]


@pytest.fixture(scope="session")
def small_flat(small_data):
    x, _ = small_data
    return deploy_flat(x, make_documents(len(x)), train_quantizer(x))


@pytest.fixture(scope="session")
def small_ivf(small_data):
    x, _ = small_data
    index = build_index(x, KmeansParams(nlist=40, seed=5))
    return deploy_ivf(x, make_documents(len(x)), index, train_quantizer(x))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: one line per criterion at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
