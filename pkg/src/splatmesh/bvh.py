"""Bounding-volume hierarchy for ray-mesh queries.

Median-split BVH with batched traversal: ray batches flow down the tree as
index subsets, so the inner loops stay vectorized. Results are required to
match the brute-force all-triangles test exactly; the acceleration only
changes which triangles get tested, never the intersection arithmetic.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .mesh import Mesh, face_normals

_LEAF_SIZE = 8


class Bvh:
    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        tris = mesh.vertices[mesh.triangles]  # (F, 3, 3)
        self.v0 = np.ascontiguousarray(tris[:, 0])
        self.e1 = np.ascontiguousarray(tris[:, 1] - tris[:, 0])
        self.e2 = np.ascontiguousarray(tris[:, 2] - tris[:, 0])
        self.normals = face_normals(mesh)
        lo = tris.min(axis=1)
        hi = tris.max(axis=1)
        cen = tris.mean(axis=1)
        order = np.arange(len(tris))
        nodes_lo, nodes_hi, nodes_left, nodes_right, nodes_start, nodes_count = [], [], [], [], [], []

        def build(idx: np.ndarray) -> int:
            node = len(nodes_lo)
            nodes_lo.append(lo[idx].min(axis=0))
            nodes_hi.append(hi[idx].max(axis=0))
            nodes_left.append(-1)
            nodes_right.append(-1)
            nodes_start.append(-1)
            nodes_count.append(0)
            if len(idx) <= _LEAF_SIZE:
                nodes_start[node] = len(self._leaf_tris)
                nodes_count[node] = len(idx)
                self._leaf_tris.extend(idx.tolist())
                return node
            ext = nodes_hi[node] - nodes_lo[node]
            axis = int(np.argmax(ext))
            half = len(idx) // 2
            part = idx[np.argsort(cen[idx, axis], kind="stable")]
            nodes_left[node] = build(part[:half])
            nodes_right[node] = build(part[half:])
            return node

        self._leaf_tris: list[int] = []
        if len(tris):
            build(order)
        self.node_lo = np.asarray(nodes_lo).reshape(-1, 3)
        self.node_hi = np.asarray(nodes_hi).reshape(-1, 3)
        self.node_left = np.asarray(nodes_left, dtype=np.int64)
        self.node_right = np.asarray(nodes_right, dtype=np.int64)
        self.node_start = np.asarray(nodes_start, dtype=np.int64)
        self.node_count = np.asarray(nodes_count, dtype=np.int64)
        self.leaf_tris = np.asarray(self._leaf_tris, dtype=np.int64)

    def _tri_hits(self, tri_idx, org, d, t_min):
        """Moller-Trumbore for a (T,) triangle set against (R, 3) rays.

        Returns (R, T) hit mask and distances (inf where no hit)."""
        v0 = self.v0[tri_idx]
        e1 = self.e1[tri_idx]
        e2 = self.e2[tri_idx]
        p = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("tk,rtk->rt", e1, p)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = org[:, None, :] - v0[None, :, :]
        u = np.einsum("rtk,rtk->rt", s, p) * inv
        q = np.cross(s, e1[None, :, :])
        v = np.einsum("rk,rtk->rt", d, q) * inv
        t = np.einsum("tk,rtk->rt", e2, q) * inv
        hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > t_min[:, None])
        return hit, np.where(hit, t, np.inf)

    def _aabb_hit(self, node, org, inv_d, t_best):
        lo = (self.node_lo[node] - org) * inv_d
        hi = (self.node_hi[node] - org) * inv_d
        tn = np.minimum(lo, hi).max(axis=-1)
        tf = np.maximum(lo, hi).min(axis=-1)
        return (tf >= np.maximum(tn, 0.0)) & (tn < t_best)

    def any_hit(self, origins: np.ndarray, dirs: np.ndarray, t_min: float | np.ndarray = 0.0) -> np.ndarray:
        """True where some triangle intersects the ray at t > t_min."""
        org = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        n = len(org)
        tm = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
        occluded = np.zeros(n, dtype=bool)
        if len(self.node_lo) == 0:
            return occluded
        if K.HAVE_NUMBA:
            return K.bvh_any_hit(self.node_lo, self.node_hi, self.node_left,
                                 self.node_right, self.node_start, self.node_count,
                                 self.leaf_tris, self.v0, self.e1, self.e2,
                                 np.ascontiguousarray(org), np.ascontiguousarray(d), tm)
        inv_d = _safe_inverse(d)
        stack = [(0, np.arange(n))]
        while stack:
            node, rays = stack.pop()
            rays = rays[~occluded[rays]]
            if len(rays) == 0:
                continue
            mask = self._aabb_hit(node, org[rays], inv_d[rays], np.full(len(rays), np.inf))
            rays = rays[mask]
            if len(rays) == 0:
                continue
            if self.node_left[node] < 0:
                s, c = self.node_start[node], self.node_count[node]
                tri_idx = self.leaf_tris[s:s + c]
                hit, _ = self._tri_hits(tri_idx, org[rays], d[rays], tm[rays])
                occluded[rays[hit.any(axis=1)]] = True
            else:
                stack.append((int(self.node_left[node]), rays))
                stack.append((int(self.node_right[node]), rays))
        return occluded

    def first_hit(self, origins: np.ndarray, dirs: np.ndarray, t_min: float = 0.0):
        """Nearest intersection per ray.

        Returns (tri (R,) int, -1 = miss; t (R,); bary (R, 2) for corners 1, 2)."""
        org = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        n = len(org)
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.int64)
        best_uv = np.zeros((n, 2))
        if len(self.node_lo) == 0:
            return best_tri, best_t, best_uv
        tm = np.full(n, float(t_min))
        if K.HAVE_NUMBA:
            tri, t, u, v = K.bvh_first_hit(
                self.node_lo, self.node_hi, self.node_left, self.node_right,
                self.node_start, self.node_count, self.leaf_tris,
                self.v0, self.e1, self.e2,
                np.ascontiguousarray(org), np.ascontiguousarray(d), tm)
            return tri, t, np.stack([u, v], axis=1)
        inv_d = _safe_inverse(d)
        stack = [(0, np.arange(n))]
        while stack:
            node, rays = stack.pop()
            mask = self._aabb_hit(node, org[rays], inv_d[rays], best_t[rays])
            rays = rays[mask]
            if len(rays) == 0:
                continue
            if self.node_left[node] < 0:
                s, c = self.node_start[node], self.node_count[node]
                tri_idx = self.leaf_tris[s:s + c]
                hit, t = self._tri_hits(tri_idx, org[rays], d[rays], tm[rays])
                t = np.where(t < best_t[rays][:, None], t, np.inf)
                k = np.argmin(t, axis=1)
                tv = t[np.arange(len(rays)), k]
                upd = np.isfinite(tv)
                rr = rays[upd]
                best_t[rr] = tv[upd]
                best_tri[rr] = tri_idx[k[upd]]
                # recompute barycentrics for the winners
                v0 = self.v0[best_tri[rr]]
                e1 = self.e1[best_tri[rr]]
                e2 = self.e2[best_tri[rr]]
                pvec = np.cross(d[rr], e2)
                det = np.einsum("rk,rk->r", e1, pvec)
                sv = org[rr] - v0
                u = np.einsum("rk,rk->r", sv, pvec) / det
                qv = np.cross(sv, e1)
                v = np.einsum("rk,rk->r", d[rr], qv) / det
                best_uv[rr, 0] = u
                best_uv[rr, 1] = v
            else:
                stack.append((int(self.node_left[node]), rays))
                stack.append((int(self.node_right[node]), rays))
        return best_tri, best_t, best_uv


def _safe_inverse(d: np.ndarray) -> np.ndarray:
    # Keeps the slab test NaN-free for axis-aligned rays.
    return 1.0 / np.where(np.abs(d) < 1e-30, np.copysign(1e-30, d), d)


def ray_mesh_visible(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray, eps: float | None = None) -> np.ndarray:
    """1 where the ray escapes the mesh, 0 where it is blocked beyond eps.

    eps defaults to 1e-4 x bounding-box diagonal; callers offset origins
    along the surface normal themselves when starting on the surface.
    """
    if eps is None:
        eps = 1e-4 * bvh.mesh.bbox_diagonal()
    occluded = bvh.any_hit(origins, dirs, t_min=eps)
    return (~occluded).astype(np.int64)
