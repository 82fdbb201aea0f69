import numpy as np
import pytest
import torch

from popcft.datagen import TitleStyle, generate_title

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def styles():
    return [
        TitleStyle("GiantMap", 11, "park", 0.5, 2.0, 2.0),
        TitleStyle("HighRise", 23, "indoor", 0.4, 3.0, 4.0),
        TitleStyle("CombatGame", 37, "terrain", 0.7, 1.5, 6.0),
    ]


@pytest.fixture(scope="session")
def small_titles(styles):
    """Three small 32x32 titles for fast trainer tests."""
    return [generate_title(s, 12, 4, 4, 12, seed=3, image_size=(32, 32)) for s in styles]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
