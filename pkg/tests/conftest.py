import os
from pathlib import Path

import numpy as np
import pytest

from dualnorm.models import Architecture, build_model
from dualnorm.normcore import NormConfig

CACHE_DIR = Path(os.environ.get(
    "DUALNORM_TEST_CACHE", Path(__file__).parent / ".cache"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(mode="single", kind="bn", heads=1, seed=0, dtype=np.float64,
               width=0.25, arch="small_cnn", groups=4):
    cfg = NormConfig(kind=kind, mode=mode, group_count=groups)
    return build_model(Architecture(arch, width), cfg, heads=heads,
                       seed=seed, dtype=dtype)


def random_batch(rng, n=4, dtype=np.float64):
    x = rng.uniform(0.02, 0.98, (n, 3, 32, 32)).astype(dtype)
    y = rng.integers(0, 10, n)
    return x, y
