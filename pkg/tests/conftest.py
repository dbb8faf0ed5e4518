import numpy as np
import pytest

from irrcast.data import drop_random, make_windows, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sine_series():
    return synth_generate("sine_mixture", {"n_vars": 2}, 240, seed=0)


@pytest.fixture(scope="session")
def irregular_windows(sine_series):
    dropped = drop_random(sine_series, 0.4, seed=3)
    return make_windows(dropped, 16, 8, stride=4)
