import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from svfreg.grid import ScalarVolume, VectorField


def smooth_volume(dims, sigma=2.0, seed=0, scale=1.0):
    """A smooth random scalar volume (Gaussian-filtered white noise)."""
    rng = np.random.default_rng(seed)
    data = gaussian_filter(rng.normal(size=dims), sigma)
    return ScalarVolume(scale * data / max(np.abs(data).max(), 1e-12))


def smooth_field(dims, amplitude, sigma, seed):
    """A smooth random vector field with max magnitude == amplitude."""
    rng = np.random.default_rng(seed)
    data = np.stack([gaussian_filter(rng.normal(size=dims), sigma) for _ in range(3)])
    peak = np.linalg.norm(data, axis=0).max()
    if amplitude == 0 or peak == 0:
        return VectorField(np.zeros((3,) + tuple(dims)))
    return VectorField(data * (amplitude / peak))


def oracle_trilinear(data, point):
    """Independent 8-corner trilinear interpolation with replicate clamping
    (plain Python; no shared code with the implementation)."""
    nx, ny, nz = data.shape
    coords = []
    for p, n in zip(point, (nx, ny, nz)):
        p = min(max(float(p), 0.0), n - 1.0)
        i = min(int(np.floor(p)), n - 2)
        coords.append((i, p - i))
    (ix, fx), (iy, fy), (iz, fz) = coords
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((fx if dx else 1 - fx) * (fy if dy else 1 - fy)
                     * (fz if dz else 1 - fz))
                total += w * data[ix + dx, iy + dy, iz + dz]
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
