import numpy as np
import pytest
import torch

from committee_distill.data import ToyParams, in_memory_dataset


@pytest.fixture(scope="session")
def toy_splits():
    """Small in-memory 10-class set used by most unit tests."""
    return in_memory_dataset("toy10")


@pytest.fixture(scope="session")
def toy_train(toy_splits):
    return toy_splits[0]


@pytest.fixture(scope="session")
def toy_test(toy_splits):
    return toy_splits[1]


@pytest.fixture(scope="session")
def micro_splits():
    """Even smaller set (20 per class) for training-loop tests."""
    params = ToyParams(train_per_class=20, test_per_class=10, noise_sigma=0.08,
                       seed=11)
    return in_memory_dataset("toy10", params=params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def assert_state_dicts_equal(a, b, bitwise=True):
    assert sorted(a.keys()) == sorted(b.keys())
    for key in a:
        if bitwise:
            assert torch.equal(a[key], b[key]), f"mismatch at {key}"
        else:
            assert torch.allclose(a[key], b[key]), f"mismatch at {key}"
