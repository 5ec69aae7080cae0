import numpy as np
import pytest

from defusion.imaging import Image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_image(rng):
    return Image(rng.uniform(0.1, 0.9, size=(48, 48, 3)))


def make_image(rng, h=48, w=48, lo=0.1, hi=0.9):
    return Image(rng.uniform(lo, hi, size=(h, w, 3)))
