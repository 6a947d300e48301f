import numpy as np
import pytest


def wave_texture(shape, shift=(0.0, 0.0), seed=0, n_waves=14, amplitude=12.0,
                 min_wavelength=9.0, max_wavelength=40.0):
    """Smooth multi-frequency texture; shifting evaluates the same analytic
    field at translated coordinates, giving exact sub-pixel image motion."""
    rng = np.random.default_rng(seed)
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    x = x - shift[0]
    y = y - shift[1]
    img = np.full(shape, 128.0)
    for _ in range(n_waves):
        lam = rng.uniform(min_wavelength, max_wavelength)
        ang = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        kx = 2 * np.pi / lam * np.cos(ang)
        ky = 2 * np.pi / lam * np.sin(ang)
        img += amplitude * np.sin(kx * x + ky * y + phase)
    return np.clip(img, 0, 255)


@pytest.fixture
def textured_pair():
    def make(shift, shape=(480, 640), seed=3):
        prev = wave_texture(shape, (0, 0), seed=seed)
        cur = wave_texture(shape, shift, seed=seed)
        return prev, cur
    return make
