"""Deform the surface so triangle centroids track Gaussian boundary evidence.

Two parametrizations share the objective: coefficients of an orthonormal
displacement basis (smooth, strongly regularized) or free vertex positions.
Regularization keeps per-vertex perturbations locally mean-consistent and
penalizes face-normal changes from the initial geometry.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .losses import laplacian_feature_loss, adjacency_arrays
from .mesh import Mesh, EdgeAdjacency, vertex_adjacency
from .optim import Adam


@dataclass
class DeformBasis:
    """Orthonormal vertex-displacement basis: v(c) = mean + sum c_m * modes_m."""

    mean: np.ndarray    # (V, 3)
    modes: np.ndarray   # (M, V, 3), orthonormal under the flattened dot product
    coeffs: np.ndarray  # (M,)

    def reconstruct(self, coeffs: np.ndarray | None = None) -> np.ndarray:
        c = self.coeffs if coeffs is None else coeffs
        return self.mean + np.einsum("m,mvk->vk", c, self.modes)

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, modes=self.modes, coeffs=self.coeffs)

    @staticmethod
    def load(path) -> "DeformBasis":
        z = np.load(path)
        return DeformBasis(z["mean"], z["modes"], z["coeffs"])


def _similarity_fields(vertices: np.ndarray) -> np.ndarray:
    """Displacement fields of the 7-dim similarity group (translations,
    infinitesimal rotations, uniform scale) about the centroid."""
    V = len(vertices)
    c = vertices - vertices.mean(axis=0)
    fields = np.zeros((7, V, 3))
    fields[0, :, 0] = 1.0
    fields[1, :, 1] = 1.0
    fields[2, :, 2] = 1.0
    for k, axis in enumerate(np.eye(3)):
        fields[3 + k] = np.cross(axis, c)
    fields[6] = c
    return fields


def make_smooth_basis(vertices: np.ndarray, n_modes: int, seed: int,
                      length_scale: float = 0.6) -> DeformBasis:
    """Random smooth displacement fields, orthonormalized.

    Fields are Gaussian-kernel mixtures anchored at random surface points,
    which keeps them low-frequency over the surface. The similarity-group
    component (rigid motion + uniform scale) is projected out so basis
    deformations cannot be absorbed by camera extrinsics."""
    rng = np.random.default_rng(seed)
    V = len(vertices)
    fields = np.zeros((n_modes, V, 3))
    for m in range(n_modes):
        n_centers = 6
        centers = vertices[rng.integers(0, V, size=n_centers)]
        dirs = rng.normal(size=(n_centers, 3))
        widths = length_scale * rng.uniform(0.7, 1.6, size=n_centers)
        for c, d, w in zip(centers, dirs, widths):
            r2 = np.sum((vertices - c) ** 2, axis=1)
            fields[m] += np.exp(-0.5 * r2 / w ** 2)[:, None] * d
    flat = fields.reshape(n_modes, -1)
    sim = _similarity_fields(vertices).reshape(7, -1)
    sim_q, _ = np.linalg.qr(sim.T)
    flat = flat - (flat @ sim_q) @ sim_q.T
    q, _ = np.linalg.qr(flat.T)
    modes = q.T[:n_modes].reshape(n_modes, V, 3)
    return DeformBasis(vertices.copy(), modes, np.zeros(n_modes))


def centroid_loss(vertices: np.ndarray, triangles: np.ndarray,
                  targets: np.ndarray, skip: np.ndarray | None = None):
    """sum_i || centroid_i - x*_i ||^2 over non-flagged triangles.

    Returns (value, dvertices)."""
    cen = vertices[triangles].mean(axis=1)
    r = cen - targets
    if skip is not None:
        r = np.where(skip[:, None], 0.0, r)
    value = float(np.sum(r * r))
    dvert = np.zeros_like(vertices)
    contrib = (2.0 / 3.0) * r
    for k in range(3):
        np.add.at(dvert, triangles[:, k], contrib)
    return value, dvert


def vertex_laplacian_reg(delta: np.ndarray, vadj: list[list[int]] | tuple):
    """sum_v || dv - mean(dv of edge-connected neighbors) ||^2 on perturbations."""
    adj = vadj if isinstance(vadj, tuple) else adjacency_arrays(EdgeAdjacency(vadj))
    return laplacian_feature_loss(delta, adj)


def normal_change_reg(vertices: np.ndarray, vertices_init: np.ndarray,
                      triangles: np.ndarray):
    """sum_f || n_f(v) - n_f(v_init) ||^2; returns (value, dvertices)."""
    def normals_and_parts(v):
        c = v[triangles]
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        u = np.cross(e1, e2)
        ln = np.linalg.norm(u, axis=1, keepdims=True)
        return u / ln, e1, e2, ln

    n, e1, e2, ln = normals_and_parts(vertices)
    n0, _, _, _ = normals_and_parts(vertices_init)
    r = n - n0
    value = float(np.sum(r * r))
    dn = 2.0 * r
    # n = u/|u|: dL/du = (dn - n (n.dn)) / |u|
    du = (dn - n * np.sum(n * dn, axis=1, keepdims=True)) / ln
    de1 = np.cross(e2, du)
    de2 = np.cross(du, e1)
    dvert = np.zeros_like(vertices)
    np.add.at(dvert, triangles[:, 0], -de1 - de2)
    np.add.at(dvert, triangles[:, 1], de1)
    np.add.at(dvert, triangles[:, 2], de2)
    return value, dvert


def pca_penalty(coeffs: np.ndarray):
    """sum_m max(|c_m| - 1, 0)^2; free inside the unit box."""
    over = np.maximum(np.abs(coeffs) - 1.0, 0.0)
    value = float(np.sum(over * over))
    grad = 2.0 * over * np.sign(coeffs)
    return value, grad


class RefineDiverged(RuntimeError):
    pass


def refine(mesh: Mesh, targets: np.ndarray, skip: np.ndarray, mode: str,
           basis: DeformBasis | None = None, iters: int = 2000, lr: float = 5e-3,
           lam_vertex: float = 2.0, lam_normal: float = 0.2, lam_pca: float = 1.0,
           log_path=None):
    """Adam descent of centroid_loss + regularizers over PCA coefficients or
    raw vertex positions. Returns (new_vertices, coeffs-or-None, history).

    Aborts if the objective exceeds 10x its initial value."""
    if mode not in ("pca", "vertex"):
        raise ValueError(f"unknown refine mode {mode!r}")
    if mode == "pca" and basis is None:
        raise ValueError("pca mode needs a DeformBasis")
    v_init = mesh.vertices.copy()
    vadj = adjacency_arrays(EdgeAdjacency(vertex_adjacency(mesh)))
    tris = mesh.triangles

    if mode == "pca":
        params = {"coeffs": basis.coeffs.copy()}
        opt = Adam(params, {"coeffs": lr})
    else:
        params = {"vertices": v_init.copy()}
        opt = Adam(params, {"vertices": lr})

    def evaluate():
        if mode == "pca":
            v = basis.reconstruct(params["coeffs"])
        else:
            v = params["vertices"]
        lc, dv_c = centroid_loss(v, tris, targets, skip)
        lv, dv_l = vertex_laplacian_reg(v - v_init, vadj)
        ln_, dv_n = normal_change_reg(v, v_init, tris)
        total = lc + lam_vertex * lv + lam_normal * ln_
        dv = dv_c + lam_vertex * dv_l + lam_normal * dv_n
        parts = {"centroid": lc, "vertex_reg": lv, "normal_reg": ln_}
        if mode == "pca":
            lp, dc_p = pca_penalty(params["coeffs"])
            total += lam_pca * lp
            parts["pca_reg"] = lp
            dcoeffs = np.einsum("vk,mvk->m", dv, basis.modes) + lam_pca * dc_p
            return total, {"coeffs": dcoeffs}, parts
        return total, {"vertices": dv}, parts

    history = []
    initial = None
    for it in range(iters):
        total, grads, parts = evaluate()
        if initial is None:
            initial = total
        if initial > 0 and total > 10.0 * initial:
            raise RefineDiverged(
                f"refine({mode}) diverged at iter {it}: {total:.4g} > 10 x {initial:.4g}")
        history.append({"iteration": it, **parts, "total": total})
        opt.step(grads)
    if log_path is not None and history:
        with open(log_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(history[0].keys()))
            w.writeheader()
            w.writerows(history)
    if mode == "pca":
        return basis.reconstruct(params["coeffs"]), params["coeffs"], history
    return params["vertices"], None, history
