"""Real spherical-harmonics basis (degree <= 3) and its directional derivative.

Sign and ordering conventions follow the widely used 3DGS layout, so a
coefficient array of shape (..., 16, 3) is interchangeable with other
splatting code bases.
"""
from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int = MAX_DEGREE) -> np.ndarray:
    """Evaluate the basis at unit directions.

    Returns an array of shape (N, 16); columns above ``num_coeffs(degree)``
    are zero so callers can always contract against a full coefficient set.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.zeros((dirs.shape[0], 16))
    out[:, 0] = C0
    if degree >= 1:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = C2[0] * x * y
        out[:, 5] = C2[1] * y * z
        out[:, 6] = C2[2] * (2 * zz - xx - yy)
        out[:, 7] = C2[3] * x * z
        out[:, 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = C3[0] * y * (3 * xx - yy)
        out[:, 10] = C3[1] * x * y * z
        out[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = C3[5] * z * (xx - yy)
        out[:, 15] = C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int = MAX_DEGREE) -> np.ndarray:
    """Partial derivatives of each basis function w.r.t. (x, y, z).

    Shape (N, 16, 3). The direction is treated as a free 3-vector here; the
    projection onto the unit sphere is handled by the caller.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = dirs.shape[0]
    g = np.zeros((n, 16, 3))
    if degree >= 1:
        g[:, 1, 1] = -C1
        g[:, 2, 2] = C1
        g[:, 3, 0] = -C1
    if degree >= 2:
        g[:, 4, 0] = C2[0] * y
        g[:, 4, 1] = C2[0] * x
        g[:, 5, 1] = C2[1] * z
        g[:, 5, 2] = C2[1] * y
        g[:, 6, 0] = -2 * C2[2] * x
        g[:, 6, 1] = -2 * C2[2] * y
        g[:, 6, 2] = 4 * C2[2] * z
        g[:, 7, 0] = C2[3] * z
        g[:, 7, 2] = C2[3] * x
        g[:, 8, 0] = 2 * C2[4] * x
        g[:, 8, 1] = -2 * C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = C3[0] * 6 * x * y
        g[:, 9, 1] = C3[0] * (3 * xx - 3 * yy)
        g[:, 10, 0] = C3[1] * y * z
        g[:, 10, 1] = C3[1] * x * z
        g[:, 10, 2] = C3[1] * x * y
        g[:, 11, 0] = C3[2] * (-2 * x * y)
        g[:, 11, 1] = C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = C3[2] * 8 * y * z
        g[:, 12, 0] = C3[3] * (-6 * x * z)
        g[:, 12, 1] = C3[3] * (-6 * y * z)
        g[:, 12, 2] = C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = C3[4] * (-2 * x * y)
        g[:, 13, 2] = C3[4] * 8 * x * z
        g[:, 14, 0] = C3[5] * 2 * x * z
        g[:, 14, 1] = C3[5] * (-2 * y * z)
        g[:, 14, 2] = C3[5] * (xx - yy)
        g[:, 15, 0] = C3[6] * (3 * xx - 3 * yy)
        g[:, 15, 1] = C3[6] * (-6 * x * y)
    return g


def evaluate_sh(sh_coeffs: np.ndarray, view_direction: np.ndarray, degree: int) -> np.ndarray:
    """RGB color of one Gaussian seen along ``view_direction``.

    ``sh_coeffs`` has shape (16, 3) (or (k, 3) with k >= (degree+1)**2).
    The direction is normalized here; a zero vector is rejected.
    """
    d = np.asarray(view_direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if not norm > 0.0:
        raise ValueError("view direction has zero length")
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    k = num_coeffs(degree)
    basis = sh_basis(d / norm, degree)[0, :k]
    rgb = basis @ coeffs[:k] + 0.5
    return np.maximum(rgb, 0.0)


def rgb_to_dc(rgb) -> np.ndarray:
    """DC coefficient that reproduces ``rgb`` at degree 0."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0
