import numpy as np
import pytest

from hybrid_hte.cate import ForestSpec
from hybrid_hte.dataset import TrialDataset
from hybrid_hte.simgen import generate_trial, preset


@pytest.fixture(scope="session")
def small_forest():
    return ForestSpec(n_trees=100, seed=11)


@pytest.fixture(scope="session")
def strong_trial():
    return generate_trial(preset("strong"), 7)


@pytest.fixture(scope="session")
def null_trial():
    return generate_trial(preset("no"), 3)


def make_dataset(n=40, p=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    a = np.tile([0, 1], n // 2 + 1)[:n]
    y = rng.integers(0, 2, n)
    return TrialDataset(x, a, y, tuple(f"x{j + 1}" for j in range(p)), **kw)
