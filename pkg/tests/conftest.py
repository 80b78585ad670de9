import numpy as np
import pytest
import torch

from data.volumes import SegmentationDataset
from tests.helpers import synthetic_volume


@pytest.fixture(autouse=True)
def _reset_determinism():
    yield
    torch.use_deterministic_algorithms(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    train = [synthetic_volume("vol_a", 2, 32, 1), synthetic_volume("vol_b", 2, 32, 2)]
    val = [synthetic_volume("vol_c", 2, 32, 3)]
    test = [synthetic_volume("vol_d", 2, 32, 4)]
    return SegmentationDataset(train=train, val=val, test=test)
