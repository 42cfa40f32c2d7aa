import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_instance():
    from sporeloc.relocation import RelocationInstance

    tt = np.array([[0.0, 5.0, 20.0], [5.0, 0.0, 8.0], [20.0, 8.0, 0.0]])
    cost = np.array([[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]])
    return RelocationInstance([4.0, 6.0, 2.0], [5.0, 5.0, 6.0], tt, cost, budget=6.0)
