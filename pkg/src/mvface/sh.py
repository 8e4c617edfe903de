"""Second-order real spherical harmonics lighting.

Basis order (b = 0..8) and constants, evaluated at a unit normal (x, y, z)::

    H0 = 1 / (2 sqrt(pi))                 = 0.28209479177387814
    H1 = sqrt(3 / (4 pi)) * y             c1 = 0.4886025119029199
    H2 = sqrt(3 / (4 pi)) * z
    H3 = sqrt(3 / (4 pi)) * x
    H4 = 1/2 sqrt(15 / pi) * x y          c2 = 1.0925484305920792
    H5 = 1/2 sqrt(15 / pi) * y z
    H6 = 1/4 sqrt(5 / pi) * (3 z^2 - 1)   c3 = 0.31539156525252005
    H7 = 1/2 sqrt(15 / pi) * x z
    H8 = 1/4 sqrt(15 / pi) * (x^2 - y^2)  c4 = 0.5462742152960396

Lighting coefficients are stored as 27 reals laid out ``(9 bands, 3 channels)``
row-major, so ``theta.reshape(9, 3)[b, c]`` multiplies ``H_b`` for channel c.
"""
from __future__ import annotations

import numpy as np

SH_C0 = 0.5 / np.sqrt(np.pi)
SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))
SH_C2 = 0.5 * np.sqrt(15.0 / np.pi)
SH_C3 = 0.25 * np.sqrt(5.0 / np.pi)
SH_C4 = 0.25 * np.sqrt(15.0 / np.pi)

N_SH = 27

# band-0 coefficient giving unit irradiance for every normal
UNIT_IRRADIANCE = 2.0 * np.sqrt(np.pi)


def sh_basis(normals) -> np.ndarray:
    """Evaluate the 9 basis functions at unit normals, shape (..., 9)."""
    n = np.asarray(normals, dtype=float)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], axis=-1)


def unit_lighting() -> np.ndarray:
    theta = np.zeros((9, 3))
    theta[0] = UNIT_IRRADIANCE
    return theta.ravel()


def sh_shade(normal, albedo_rgb, theta) -> np.ndarray:
    """Lambertian SH shading; ``albedo * (H(n) @ theta)`` per channel.

    Works on a single normal or on arrays of normals with matching albedo.
    No clamping happens here.
    """
    th = np.asarray(theta, dtype=float).reshape(9, 3)
    irradiance = sh_basis(normal) @ th
    return np.asarray(albedo_rgb, dtype=float) * irradiance
