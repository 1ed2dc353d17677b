import pytest

from gm_policy import GaussianMixturePolicy
from models import benchmark_spec_10d
from simulator import simulate_dataset, uniform_x0_sampler
from tests.helpers import make_spec
from value_net import initialize


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_spec():
    return make_spec()


@pytest.fixture
def benchmark_spec():
    return benchmark_spec_10d()


@pytest.fixture
def policy_1d():
    """Two constant components in one action dimension over a 2-D state"""
    return GaussianMixturePolicy.constant([0.4, 0.6], [[-0.3], [0.25]], [0.5, 0.6], state_dim=2)


@pytest.fixture
def tiny_net():
    return initialize({'input_dim': 4, 'hidden_layers': [8, 8], 'output_dim': 1}, seed=3)


@pytest.fixture
def tiny_dataset(tiny_spec, policy_1d):
    return simulate_dataset(tiny_spec, policy_1d, 6, seed=11, x0_sampler=uniform_x0_sampler())
