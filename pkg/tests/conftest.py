import numpy as np
import pytest
import torch

from singleshape.procedural import colonnade
from singleshape.train import TrainConfig, init_state, train_all
from singleshape.voxgrid import PyramidConfig, build_pyramid


@pytest.fixture(autouse=True)
def _deterministic():
    torch.use_deterministic_algorithms(True)
    yield


TINY_TRAIN = dict(iters_per_scale=3, channels=8, log_every=1, seed=11)


def tiny_pyramid(num_scales=2):
    return build_pyramid(colonnade((32, 16, 24)), PyramidConfig(num_scales=num_scales))


def train_tiny(**overrides):
    cfg = TrainConfig(**{**TINY_TRAIN, **overrides})
    pyr = tiny_pyramid()
    state = init_state(pyr.dims, cfg)
    stack = train_all(pyr, cfg, state)
    return stack, state, pyr


@pytest.fixture(scope="session")
def tiny_model():
    """(stack, state, pyramid) from a few iterations on a small colonnade."""
    torch.use_deterministic_algorithms(True)
    return train_tiny()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
