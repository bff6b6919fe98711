import numpy as np
import pytest

from fineprune import data, nnet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return nnet.init_network(nnet.dense_stack([2, 4, 3]), seed=7)


@pytest.fixture(scope="session")
def task():
    return data.transfer_task(seed=0)


@pytest.fixture(scope="session")
def pretrained(task):
    return data.pretrain(nnet.dense_stack([2, 64, 64, 6]), task.source, 30, 0.05, 0,
                         target_classes=3)


def random_batch(rng, n, d, classes):
    return nnet.Batch(rng.standard_normal((n, d)), rng.integers(0, classes, n))
