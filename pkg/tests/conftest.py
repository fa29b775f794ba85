import numpy as np
import pytest

from mpxscreen.imaging import ScreeningImage


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_image(rng):
    pixels = rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)
    return ScreeningImage(pixels=pixels, source_id="fixture")


def make_image(height, width, value=None, seed=0):
    if value is not None:
        pixels = np.full((height, width, 3), value, dtype=np.uint8)
    else:
        pixels = np.random.default_rng(seed).integers(
            0, 256, size=(height, width, 3), dtype=np.uint8
        )
    return ScreeningImage(pixels=pixels, source_id=f"gen-{height}x{width}")
