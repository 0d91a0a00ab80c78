import numpy as np
import pytest

from densegrade.model import build_model, preset


@pytest.fixture
def tiny_model():
    return build_model(preset("tiny", 18, (32, 32, 3)), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
