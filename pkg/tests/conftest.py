import numpy as np
import pytest

from sketret.data import GeneratorSpec, generate_synthetic_dataset
from sketret.model import DimensionSpec, init_params

# filled by the acceptance module, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def bundle():
    return generate_synthetic_dataset(GeneratorSpec(seed=0))


@pytest.fixture(scope="session")
def small_bundle():
    return generate_synthetic_dataset(GeneratorSpec(
        n_classes=5, images_per_class=4, sketches_per_class=4, grid=3, channels=2,
        sem_dim=4, n_superclusters=2, unseen_fraction=0.2, seed=3,
    ))


@pytest.fixture
def small_dims():
    return DimensionSpec(grid=3, channels=2, latent_dim=4, hidden_dim=5, codec_dim=3, n_seen=4,
                         sem_dim=4, sem_hidden=6, gcn_dim=4, gcn_pool=2)


@pytest.fixture
def small_params(small_dims):
    return init_params(small_dims, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
