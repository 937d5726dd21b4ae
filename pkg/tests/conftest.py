import numpy as np
import pytest

from promptcodec.backbone import ModelConfig


@pytest.fixture
def tiny_config():
    """Smallest legal architecture; keeps forward passes fast in unit tests."""
    return ModelConfig(widths=(16, 16, 16, 16), latent_channels=16, hyper_channels=16)


@pytest.fixture
def desk_config():
    return ModelConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
