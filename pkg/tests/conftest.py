import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import csfold.autodiff as ad


@pytest.fixture(autouse=True)
def _restore_dtype_and_checks():
    """Keep precision/debug toggles from leaking between tests."""
    dtype = ad.default_dtype()
    yield
    ad.set_default_dtype(dtype)
    ad.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_smooth_images(count: int, size: int, seed: int) -> list[np.ndarray]:
    """Deterministic smooth synthetic grayscale images in [0,1]."""
    gen = np.random.default_rng(seed)
    images = []
    for _ in range(count):
        noise = gen.normal(size=(size, size))
        spectrum = np.fft.rfft2(noise)
        fy = np.fft.fftfreq(size)[:, None]
        fx = np.fft.rfftfreq(size)[None, :]
        spectrum /= (0.05 + np.hypot(fy, fx)) ** 1.5
        img = np.fft.irfft2(spectrum, s=(size, size))
        img -= img.min()
        img /= max(img.max(), 1e-12)
        images.append(img.astype(np.float64))
    return images
