"""Real spherical harmonics, diffuse-irradiance evaluation, and gradients.

The first nine basis functions (bands 0-2) drive the lighting estimate;
bands up to 3 (16 functions) drive per-Gaussian view-dependent color.
Band-wise normalization constants A = (pi, 2pi/3, pi/4) convert lighting
coefficients into irradiance.
"""

from __future__ import annotations

import numpy as np

# Band constants for the diffuse irradiance sum.
A_BAND = np.array([np.pi, 2.0 * np.pi / 3.0, np.pi / 4.0])

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = np.array([1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
                1.0925484305920792, 0.5462742152960396])
_C3 = np.array([0.5900435899266435, 2.890611442640554, 0.4570457994644658,
                0.3731763325901154, 0.4570457994644658, 1.445305721320277,
                0.5900435899266435])


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    dirs: (..., 3) unit vectors -> (..., (degree+1)^2).
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (n_coeffs(degree),), dtype=np.float64)
    out[..., 0] = _C0
    if degree >= 1:
        out[..., 1] = _C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = _C1 * x
    if degree >= 2:
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = _C2[1] * y * z
        out[..., 6] = _C2[2] * (3.0 * z * z - 1.0)
        out[..., 7] = _C2[3] * x * z
        out[..., 8] = _C2[4] * (x * x - y * y)
    if degree >= 3:
        out[..., 9] = _C3[0] * y * (3.0 * x * x - y * y)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = _C3[2] * y * (5.0 * z * z - 1.0)
        out[..., 12] = _C3[3] * z * (5.0 * z * z - 3.0)
        out[..., 13] = _C3[4] * x * (5.0 * z * z - 1.0)
        out[..., 14] = _C3[5] * z * (x * x - y * y)
        out[..., 15] = _C3[6] * x * (x * x - 3.0 * y * y)
    if degree >= 4:
        raise ValueError("SH degree > 3 not supported")
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis_k)/d(dir) for each basis function: (..., K, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    K = n_coeffs(degree)
    g = np.zeros(d.shape[:-1] + (K, 3), dtype=np.float64)
    if degree >= 1:
        g[..., 1, 1] = _C1
        g[..., 2, 2] = _C1
        g[..., 3, 0] = _C1
    if degree >= 2:
        g[..., 4, 0] = _C2[0] * y
        g[..., 4, 1] = _C2[0] * x
        g[..., 5, 1] = _C2[1] * z
        g[..., 5, 2] = _C2[1] * y
        g[..., 6, 2] = _C2[2] * 6.0 * z
        g[..., 7, 0] = _C2[3] * z
        g[..., 7, 2] = _C2[3] * x
        g[..., 8, 0] = _C2[4] * 2.0 * x
        g[..., 8, 1] = -_C2[4] * 2.0 * y
    if degree >= 3:
        g[..., 9, 0] = _C3[0] * 6.0 * x * y
        g[..., 9, 1] = _C3[0] * (3.0 * x * x - 3.0 * y * y)
        g[..., 10, 0] = _C3[1] * y * z
        g[..., 10, 1] = _C3[1] * x * z
        g[..., 10, 2] = _C3[1] * x * y
        g[..., 11, 1] = _C3[2] * (5.0 * z * z - 1.0)
        g[..., 11, 2] = _C3[2] * 10.0 * y * z
        g[..., 12, 2] = _C3[3] * (15.0 * z * z - 3.0)
        g[..., 13, 0] = _C3[4] * (5.0 * z * z - 1.0)
        g[..., 13, 2] = _C3[4] * 10.0 * x * z
        g[..., 14, 0] = _C3[5] * 2.0 * x * z
        g[..., 14, 1] = -_C3[5] * 2.0 * y * z
        g[..., 14, 2] = _C3[5] * (x * x - y * y)
        g[..., 15, 0] = _C3[6] * (3.0 * x * x - 3.0 * y * y)
        g[..., 15, 1] = -_C3[6] * 6.0 * x * y
    _ = zero
    return g


def band_of_coeff() -> np.ndarray:
    """Band index of each of the 9 lighting coefficients."""
    return np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])


def sh_eval(l: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Diffuse irradiance sum_k l_k A_k Y_k(n) per color channel.

    l: (9, 3) coefficients, n: (..., 3) unit normals -> (..., 3) rgb.
    """
    l = np.asarray(l, dtype=np.float64)
    if l.shape != (9, 3):
        raise ValueError("lighting coefficients must have shape (9, 3)")
    Y = sh_basis(n, 2)  # (..., 9)
    weighted = l * A_BAND[band_of_coeff()][:, None]  # (9, 3)
    return Y @ weighted


def sh_eval_bwd(l: np.ndarray, n: np.ndarray, dout: np.ndarray):
    """Gradients of sh_eval: returns (dl (9,3), dn (...,3))."""
    l = np.asarray(l, dtype=np.float64)
    Y = sh_basis(n, 2)
    A = A_BAND[band_of_coeff()]
    weighted = l * A[:, None]
    # dl[k, c] = A_k * sum_pix Y_k * dout_c
    Yf = Y.reshape(-1, 9)
    df = np.asarray(dout, dtype=np.float64).reshape(-1, 3)
    dl = (Yf.T @ df) * A[:, None]
    # dn = sum_k (dout . weighted_k) dY_k/dn
    gY = sh_basis_grad(n, 2)  # (..., 9, 3)
    coeff = np.asarray(dout, dtype=np.float64) @ weighted.T  # (..., 9)
    dn = np.sum(coeff[..., None] * gY, axis=-2)
    return dl, dn
