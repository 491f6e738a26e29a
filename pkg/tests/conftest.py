import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long behavioural reproductions (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
