import numpy as np
import pytest

from cmunet import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seeded():
    T.set_seed(7)
    yield


@pytest.fixture
def tiny_dataset(tmp_path):
    """Small synthetic dataset shared by training/CLI tests."""
    from cmunet import data as D
    root = tmp_path / "ds"
    return D.synth_generate(root, 16, 64, 4, seed=3)
