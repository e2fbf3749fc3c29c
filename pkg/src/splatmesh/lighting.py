"""Spherical-harmonic lighting estimation with occlusion and learned normals.

Lighting is an order-2 SH irradiance sum per color channel. Per-pixel
normals are the interpolated vertex normals perturbed by an alpha-blended
learned rotation (a normal-map stand-in). Screen-space occlusion maps hold
the per-channel visible fraction of hemisphere irradiance, Monte Carlo
integrated against the mesh with a lagged copy of the lighting
coefficients; they are recomputed only occasionally and treated as
constants by the gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bvh import Bvh, ray_mesh_visible
from .rotations import axis_angle_to_rot, axis_angle_to_rot_bwd
from .sh import sh_basis, A_BAND, band_of_coeff


@dataclass
class SHLighting:
    """Order-2 SH coefficients per color channel with band normalizations."""

    l: np.ndarray  # (9, 3)

    def __post_init__(self):
        self.l = np.asarray(self.l, dtype=np.float64)
        if self.l.shape != (9, 3):
            raise ValueError("lighting coefficients must be (9, 3)")

    @staticmethod
    def gray(dc: float = 1.0) -> "SHLighting":
        l = np.zeros((9, 3))
        l[0, :] = dc
        return SHLighting(l)

    def to_json(self) -> dict:
        return {"l": self.l.tolist(), "A": A_BAND.tolist()}

    @staticmethod
    def from_json(d: dict) -> "SHLighting":
        return SHLighting(np.asarray(d["l"]))


def lighting_reg(l: np.ndarray):
    """|| l_0 - mean_channels(l_0) ||_2 on the DC coefficients.

    Returns (value, dl (9,3))."""
    l0 = l[0]
    r = l0 - l0.mean()
    value = float(np.linalg.norm(r))
    dl = np.zeros_like(l)
    if value > 1e-14:
        d0 = r / value
        dl[0] = d0 - d0.mean()
    return value, dl


def pixel_normal(interp_normal: np.ndarray, axis_angle: np.ndarray):
    """Perturb interpolated normals by per-pixel learned rotations.

    interp_normal, axis_angle: (P, 3). Returns (n_p (P,3), cache)."""
    R = axis_angle_to_rot(axis_angle)
    m = np.einsum("pij,pj->pi", R, interp_normal)
    ln = np.linalg.norm(m, axis=1, keepdims=True)
    ln = np.where(ln > 1e-14, ln, 1.0)
    n_p = m / ln
    return n_p, {"R": R, "m": m, "ln": ln, "n_p": n_p,
                 "axis_angle": axis_angle, "interp_normal": interp_normal}


def pixel_normal_bwd(cache: dict, dn: np.ndarray):
    """Backward of pixel_normal onto the axis-angle vectors: (P, 3)."""
    n_p, ln = cache["n_p"], cache["ln"]
    dm = (dn - n_p * np.sum(dn * n_p, axis=1, keepdims=True)) / ln
    dR = np.einsum("pi,pj->pij", dm, cache["interp_normal"])
    return axis_angle_to_rot_bwd(cache["axis_angle"], dR)


def rotation_reg(axis_angle: np.ndarray):
    """Mean Frobenius penalty || R_p - I ||_F^2 = 4 (1 - cos theta) per pixel.

    Returns (value, daxis_angle)."""
    a = np.asarray(axis_angle, dtype=np.float64)
    if a.size == 0:
        return 0.0, np.zeros_like(a)
    theta = np.linalg.norm(a, axis=-1)
    value = float(np.mean(4.0 * (1.0 - np.cos(theta))))
    small = theta < 1e-12
    th = np.where(small, 1.0, theta)
    # d/da 4(1 - cos|a|) = 4 sin|a| a / |a|; -> 4 a as |a| -> 0
    coef = np.where(small, 4.0, 4.0 * np.sin(theta) / th)
    grad = coef[:, None] * a / len(a)
    return value, grad


def cosine_hemisphere_dirs(normals: np.ndarray, samples: int, rng: np.random.Generator):
    """Stratified cosine-weighted directions about each normal: (P, S, 3)."""
    P = len(normals)
    g = int(np.sqrt(samples))
    if g * g != samples:
        raise ValueError("samples must be a perfect square for stratification")
    i, j = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    u1 = ((i.ravel()[None, :] + rng.random((P, samples))) / g)
    u2 = ((j.ravel()[None, :] + rng.random((P, samples))) / g)
    z = np.sqrt(1.0 - u1)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    # tangent basis per normal
    n = normals
    h = np.where(np.abs(n[:, 1:2]) > 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    t1 = np.cross(n, h)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    basis = np.stack([t1, t2, n], axis=1)  # (P, 3, 3) rows
    return np.einsum("psk,pki->psi", local, basis)


@dataclass
class OcclusionMap:
    """Per-view visible-irradiance fractions in [0, 1] plus the lagged
    lighting coefficients they were built with."""

    f_visible: np.ndarray   # (H, W, 3)
    l_visible: np.ndarray   # (9, 3)
    flagged: np.ndarray = None  # (H, W) denominators clamped

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = np.zeros(self.f_visible.shape[:2], dtype=bool)


def occlusion_fractions(points: np.ndarray, normals: np.ndarray, bvh: Bvh,
                        l_visible: np.ndarray, samples: int = 64,
                        seed: int = 0, eps: float | None = None,
                        denom_clamp: float = 1e-6):
    """Per-channel visible fraction at surface points (flattened form).

    Cosine-weighted hemisphere sampling makes the correction weights cancel
    in the ratio, so the estimate is sum_k l_k sum_j V Y_k(d_j) over
    sum_k l_k sum_j Y_k(d_j) per channel. Returns (f (P,3), flagged (P,))."""
    P = len(points)
    if eps is None:
        eps = 1e-4 * bvh.mesh.bbox_diagonal()
    rng = np.random.default_rng(seed)
    f = np.ones((P, 3))
    flagged = np.zeros(P, dtype=bool)
    chunk = max(1, 262144 // max(samples, 1))
    for s0 in range(0, P, chunk):
        sl = slice(s0, min(s0 + chunk, P))
        n = normals[sl]
        dirs = cosine_hemisphere_dirs(n, samples, rng)  # (p, S, 3)
        p, S, _ = dirs.shape
        org = np.broadcast_to((points[sl] + eps * n)[:, None, :], dirs.shape)
        vis = ray_mesh_visible(bvh, org.reshape(-1, 3), dirs.reshape(-1, 3), eps=eps)
        vis = vis.reshape(p, S).astype(np.float64)
        Y = sh_basis(dirs, 2)                      # (p, S, 9)
        num_k = np.einsum("psk,ps->pk", Y, vis)    # (p, 9)
        den_k = Y.sum(axis=1)                      # (p, 9)
        num = num_k @ l_visible                    # (p, 3)
        den = den_k @ l_visible
        bad = np.abs(den) < denom_clamp
        den = np.where(bad, np.where(den < 0, -denom_clamp, denom_clamp), den)
        flagged[sl] = bad.any(axis=1)
        f[sl] = np.clip(num / den, 0.0, 1.0)
    return f, flagged


def occlusion_map(gbuffer, bvh: Bvh, l_visible: np.ndarray, samples: int = 64,
                  seed: int = 0) -> OcclusionMap:
    """Screen-space occlusion map for one view; off-mesh pixels get 1."""
    H, W = gbuffer.mask.shape
    f = np.ones((H, W, 3))
    flagged = np.zeros((H, W), dtype=bool)
    idx = np.nonzero(gbuffer.mask)
    if len(idx[0]):
        pts = gbuffer.position[idx]
        nrm = gbuffer.normal[idx]
        fv, fl = occlusion_fractions(pts, nrm, bvh, l_visible, samples, seed)
        f[idx] = fv
        flagged[idx] = fl
    return OcclusionMap(f, np.asarray(l_visible).copy(), flagged)
