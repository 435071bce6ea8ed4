import numpy as np
import pytest

import helpers


@pytest.fixture
def rng():
    return helpers.rng_for(12345)


@pytest.fixture
def pure_decay():
    return helpers.pure_decay_model()


@pytest.fixture
def pumped():
    return helpers.pumped_twolevel_model()


@pytest.fixture
def twolevel_diffusive():
    return helpers.twolevel_diffusive_model()


@pytest.fixture
def oscillator():
    return helpers.small_oscillator_model()


@pytest.fixture
def excited():
    return helpers.excited()


@pytest.fixture
def ground():
    return helpers.ground()
