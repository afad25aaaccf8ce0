import numpy as np
import pytest
import torch

from divelab.features import FeatureExtractor
from divelab.rng import stream
from divelab.world import WorldConfig, make_world

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_world():
    return make_world(WorldConfig(size=12, n_images=250), seed=3)


@pytest.fixture(scope="session")
def small_extractor(small_world):
    return FeatureExtractor(n_components=16, image_shape=(3, 12, 12)).fit(small_world.images)


@pytest.fixture(scope="session")
def extractor8():
    imgs = stream(11, "fixture-images").uniform(size=(200, 3, 8, 8))
    return FeatureExtractor(n_components=16, image_shape=(3, 8, 8)).fit(imgs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
