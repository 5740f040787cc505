import numpy as np
import pytest

from pit.models import build, preset, toy_config


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_pit():
    return build(toy_config(), seed=0)


@pytest.fixture(scope="session")
def pit_ti():
    return build(preset("pit_ti"), seed=0)
