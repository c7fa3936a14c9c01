import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nestseg.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest valid model: 64x64 single-channel input, base width 2."""
    return ModelConfig(input_size=(64, 64), base_channels=2)


def pytest_addoption(parser):
    parser.addoption("--skip-slow", action="store_true", help="skip end-to-end training checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-slow"):
        skip = pytest.mark.skip(reason="--skip-slow")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)
