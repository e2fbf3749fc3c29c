"""Rotation parametrizations and their hand-derived reverse-mode derivatives.

Quaternions parametrize per-Gaussian local rotations, axis-angle vectors
parametrize camera extrinsics and per-pixel normal perturbations. Every
forward routine here has a matching ``*_bwd`` that maps a downstream
gradient w.r.t. the rotation matrix back onto the raw parameter vector;
the finite-difference harness is the arbiter of their correctness.
"""

from __future__ import annotations

import numpy as np


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (possibly unnormalized) quaternions (w, x, y, z).

    q: (..., 4) -> (..., 3, 3). Normalization happens internally so raw
    optimizer iterates stay valid between renormalization steps.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rot_bwd(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Backward of quat_to_rot: dL/dR (..., 3, 3) -> dL/dq (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = np.moveaxis(u, -1, 0)

    # dR/d(unit quat) assembled entry by entry.
    du = np.zeros(q.shape, dtype=np.float64)
    g = dR

    def acc(iw, ix, iy, iz, gij):
        du[..., 0] += iw * gij
        du[..., 1] += ix * gij
        du[..., 2] += iy * gij
        du[..., 3] += iz * gij

    acc(0.0, 0.0, -4 * y, -4 * z, g[..., 0, 0])
    acc(-2 * z, 2 * y, 2 * x, -2 * w, g[..., 0, 1])
    acc(2 * y, 2 * z, 2 * w, 2 * x, g[..., 0, 2])
    acc(2 * z, 2 * y, 2 * x, 2 * w, g[..., 1, 0])
    acc(0.0, -4 * x, 0.0, -4 * z, g[..., 1, 1])
    acc(-2 * x, -2 * w, 2 * z, 2 * y, g[..., 1, 2])
    acc(-2 * y, 2 * z, -2 * w, 2 * x, g[..., 2, 0])
    acc(2 * x, 2 * w, 2 * z, 2 * y, g[..., 2, 1])
    acc(0.0, -4 * x, -4 * y, 0.0, g[..., 2, 2])

    # Chain through normalization u = q / |q|.
    proj = np.sum(du * u, axis=-1, keepdims=True)
    return (du - proj * u) / n


def axis_angle_to_rot(r: np.ndarray) -> np.ndarray:
    """Rodrigues rotation from axis-angle vectors. r: (..., 3) -> (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)
    eye = np.broadcast_to(np.eye(3), r.shape[:-1] + (3, 3))
    small = theta < 1e-12
    th = np.where(small, 1.0, theta)
    k = r / th[..., None]
    K = _skew(k)
    s = np.sin(theta)[..., None, None]
    c = np.cos(theta)[..., None, None]
    R = eye + s * K + (1 - c) * (K @ K)
    if np.any(small):
        # First-order Rodrigues at the origin: I + [r]x.
        R_small = eye + _skew(r)
        R = np.where(small[..., None, None], R_small, R)
    return R


def axis_angle_to_rot_bwd(r: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Backward of axis_angle_to_rot following Gallego & Yezzi's closed form.

    dR/dr_i = ([r]x * r_i + [r x (I - R) e_i]x) / |r|^2 @ R, with the limit
    dR/dr_i = [e_i]x at r = 0.
    """
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 1
    if single:
        r = r[None]
        dR = dR[None]
    R = axis_angle_to_rot(r)
    theta2 = np.sum(r * r, axis=-1)
    out = np.zeros_like(r)
    eye = np.eye(3)
    ImR = eye - R
    rx = _skew(r)
    for i in range(3):
        e = eye[:, i]
        v = np.cross(r, ImR @ e)  # (..., 3)
        dRdri = (rx * r[..., i, None, None] + _skew(v)) @ R
        dRdri_small = np.broadcast_to(_skew(e), dRdri.shape)
        use_small = theta2 < 1e-16
        dRdri = np.where(use_small[..., None, None], dRdri_small, dRdri / np.where(use_small, 1.0, theta2)[..., None, None])
        out[..., i] = np.sum(dR * dRdri, axis=(-2, -1))
    return out[0] if single else out


def rot_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Log map of a single rotation matrix to its axis-angle vector."""
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-9:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        # fix signs using the largest component
        k = int(np.argmax(axis))
        signs = np.sign(M[k])
        signs[signs == 0] = 1.0
        axis = axis * signs / max(axis[k], 1e-12) * axis[k]
        axis /= np.linalg.norm(axis)
        return axis * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v / (2.0 * np.sin(theta)) * theta


def wrap_axis_angle(r: np.ndarray) -> np.ndarray:
    """Wrap axis-angle magnitude into (-pi, pi] keeping the rotation fixed."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    wrapped = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    scale = np.where(theta > 1e-12, wrapped / np.where(theta > 1e-12, theta, 1.0), 1.0)
    return r * scale


def normalize_quats(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    K = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K
