import os
import sys

import numpy as np
import pytest
from hypothesis import settings

# single-threaded BLAS keeps float reductions reproducible across runs
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

HERE = os.path.dirname(__file__)
if HERE not in sys.path:
    sys.path.insert(0, HERE)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f64():
    from healswin import autodiff as ad

    with ad.precision(np.float64):
        yield
