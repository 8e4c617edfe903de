import numpy as np
import pytest
from scipy.special import sph_harm_y

from mvface.sh import UNIT_IRRADIANCE, sh_basis, sh_shade, unit_lighting


def real_sh_scipy(l, m, n):
    """Real SH from scipy's complex harmonics (Condon-Shortley phase removed)."""
    x, y, z = n
    theta = np.arccos(np.clip(z, -1, 1))
    phi = np.arctan2(y, x)
    Y = sph_harm_y(l, abs(m), theta, phi)
    if m == 0:
        return Y.real
    sign = (-1) ** m
    if m > 0:
        return np.sqrt(2) * sign * Y.real
    return np.sqrt(2) * sign * Y.imag


# (l, m) of each basis slot
ORDER = [(0, 0), (1, -1), (1, 0), (1, 1), (2, -2), (2, -1), (2, 0), (2, 1), (2, 2)]


def test_basis_matches_scipy(rng):
    for _ in range(20):
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        H = sh_basis(n)
        ref = [real_sh_scipy(l, m, n) for l, m in ORDER]
        # real SH sign conventions differ only in the Condon-Shortley phase
        assert np.allclose(np.abs(H), np.abs(ref), atol=1e-12)
        assert np.allclose(H, ref, atol=1e-12) or np.allclose(H, [r * (-1) ** m for (l, m), r in zip(ORDER, ref)], atol=1e-12)


def test_unit_irradiance():
    assert UNIT_IRRADIANCE == pytest.approx(3.5449, abs=1e-4)
    out = sh_shade([0.0, 0.0, 1.0], [0.5, 0.5, 0.5], unit_lighting())
    assert np.allclose(out, 0.5)


def test_zero_lighting():
    assert np.allclose(sh_shade([0.6, 0.0, 0.8], [0.3, 0.7, 0.2], np.zeros(27)), 0)


def test_band1_z_sign():
    theta = np.zeros((9, 3))
    theta[2] = 1.0
    up = sh_shade([0, 0, 1.0], [1, 1, 1], theta.ravel())
    down = sh_shade([0, 0, -1.0], [1, 1, 1], theta.ravel())
    assert np.all(up > 0) and np.all(down < 0)
    assert np.allclose(up, -down)


def test_linearity(rng):
    n = rng.standard_normal((10, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    a = rng.random((10, 3))
    t1, t2 = rng.standard_normal(27), rng.standard_normal(27)
    assert np.allclose(sh_shade(n, a, t1 + 2 * t2), sh_shade(n, a, t1) + 2 * sh_shade(n, a, t2))
    assert np.allclose(sh_shade(n, 3 * a, t1), 3 * sh_shade(n, a, t1))
