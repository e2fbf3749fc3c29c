"""PCA-regularized mesh texture, de-lit compositing, and texture extraction.

The mesh texture is mean + sum_j c_j T_j over an orthonormal basis of
texture maps, sampled bilinearly at pixel UVs. composed_pixel blends the
lit mesh texture with the relightable Gaussian contribution through the
learned per-pixel weight beta. De-lit rendering drops the lighting and
view-dependent terms entirely; gathered de-lit images become a texture via
visibility-weighted projection, and the PCA basis inpaints what no view saw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bvh import Bvh, ray_mesh_visible
from .imgio import read_pfm, write_pfm
from .mesh import Mesh, face_normals


@dataclass
class PcaTexture:
    """Orthonormal texture basis; only the first n_active coefficients are
    optimized (reconstruction clamps to [0,1] at export, not in the loss)."""

    mean: np.ndarray    # (R, R, 3)
    modes: np.ndarray   # (M, R, R, 3) orthonormal
    coeffs: np.ndarray  # (M,)
    n_active: int = 20

    @property
    def resolution(self) -> int:
        return self.mean.shape[0]

    def reconstruct(self, coeffs: np.ndarray | None = None) -> np.ndarray:
        c = self.coeffs if coeffs is None else coeffs
        m = len(c)
        return self.mean + np.einsum("m,mxyc->xyc", c, self.modes[:m])

    def save(self, dirpath) -> None:
        d = Path(dirpath)
        d.mkdir(parents=True, exist_ok=True)
        write_pfm(d / "mean.pfm", self.mean)
        for i, mode in enumerate(self.modes):
            write_pfm(d / f"mode_{i:03d}.pfm", mode)
        with open(d / "manifest.json", "w") as f:
            json.dump({"format_version": 1, "n_modes": len(self.modes),
                       "n_active": self.n_active, "coeffs": self.coeffs.tolist()}, f)

    @staticmethod
    def load(dirpath) -> "PcaTexture":
        d = Path(dirpath)
        with open(d / "manifest.json") as f:
            man = json.load(f)
        mean = read_pfm(d / "mean.pfm")
        modes = np.stack([read_pfm(d / f"mode_{i:03d}.pfm") for i in range(man["n_modes"])])
        return PcaTexture(mean, modes, np.asarray(man["coeffs"]), man["n_active"])


def make_pca_texture_basis(resolution: int, n_modes: int, seed: int,
                           n_active: int = 20) -> PcaTexture:
    """Synthetic basis: smooth mean plus orthonormal low-frequency modes."""
    rng = np.random.default_rng(seed)
    u, v = np.meshgrid((np.arange(resolution) + 0.5) / resolution,
                       (np.arange(resolution) + 0.5) / resolution, indexing="xy")
    mean = np.stack([
        0.55 + 0.1 * np.sin(2 * np.pi * u) * np.cos(np.pi * v),
        0.45 + 0.08 * np.cos(2 * np.pi * v),
        0.40 + 0.06 * np.sin(np.pi * (u + v)),
    ], axis=-1)
    modes = np.zeros((n_modes, resolution, resolution, 3))
    for m in range(n_modes):
        acc = np.zeros((resolution, resolution, 3))
        for _ in range(4):
            fu, fv = rng.uniform(0.5, 3.0, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            col = rng.normal(size=3)
            acc += np.sin(2 * np.pi * fu * u + ph[0])[..., None] * \
                np.sin(2 * np.pi * fv * v + ph[1])[..., None] * col
        modes[m] = acc
    flat = modes.reshape(n_modes, -1)
    q, _ = np.linalg.qr(flat.T)
    modes = q.T[:n_modes].reshape(n_modes, resolution, resolution, 3)
    return PcaTexture(mean, modes, np.zeros(n_modes), n_active)


# ---------------------------------------------------------------------------
# bilinear texture sampling (fixed UVs; adjoint scatters into the texture)


def bilinear_setup(uv: np.ndarray, resolution: int):
    """Precompute bilinear corner indices and weights for fixed UV samples.

    Texel (row, col) covers [(col)/R, (col+1)/R) x [(row)/R, (row+1)/R);
    samples clamp to the border."""
    x = np.clip(uv[:, 0] * resolution - 0.5, 0.0, resolution - 1.0)
    y = np.clip(uv[:, 1] * resolution - 0.5, 0.0, resolution - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, resolution - 1)
    y1 = np.minimum(y0 + 1, resolution - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    idx = np.stack([y0 * resolution + x0, y0 * resolution + x1,
                    y1 * resolution + x0, y1 * resolution + x1], axis=1)
    w = np.concatenate([(1 - fx) * (1 - fy), fx * (1 - fy),
                        (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def bilinear_sample(texture: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    flat = texture.reshape(-1, texture.shape[-1])
    return np.einsum("pk,pkc->pc", w, flat[idx])


def bilinear_adjoint(dout: np.ndarray, idx: np.ndarray, w: np.ndarray,
                     resolution: int, channels: int) -> np.ndarray:
    dtex = np.zeros((resolution * resolution, channels))
    np.add.at(dtex, idx.ravel(), (w[:, :, None] * dout[:, None, :]).reshape(-1, channels))
    return dtex.reshape(resolution, resolution, channels)


# ---------------------------------------------------------------------------
# composed pixel model


def composed_pixel(tex: np.ndarray, light: np.ndarray, albedo_p: np.ndarray,
                   view_color_p: np.ndarray, beta_p: np.ndarray) -> np.ndarray:
    """(1 - beta) L tex + beta (albedo L + c), all per pixel (P, 3)/(P,)."""
    b = beta_p[:, None]
    return (1.0 - b) * light * tex + b * (albedo_p * light + view_color_p)


def composed_pixel_bwd(tex, light, albedo_p, view_color_p, beta_p, dout):
    """Gradients of composed_pixel w.r.t. all five inputs."""
    b = beta_p[:, None]
    dtex = dout * (1.0 - b) * light
    dlight = dout * ((1.0 - b) * tex + b * albedo_p)
    dalbedo = dout * b * light
    dview = dout * b
    dbeta = np.sum(dout * (albedo_p * light + view_color_p - light * tex), axis=1)
    return dtex, dlight, dalbedo, dview, dbeta


def delit_pixel(tex: np.ndarray, albedo_p: np.ndarray, beta_p: np.ndarray) -> np.ndarray:
    """composed_pixel with lighting forced to one and view color dropped."""
    b = beta_p[:, None]
    return (1.0 - b) * tex + b * albedo_p


def blending_loss(beta_p: np.ndarray):
    """L2 norm of the per-pixel compositing weights; returns (value, grad)."""
    value = float(np.linalg.norm(beta_p))
    grad = beta_p / value if value > 1e-14 else np.zeros_like(beta_p)
    return value, grad


def view_color_loss(colors: np.ndarray):
    """L2 norm over the per-Gaussian view-dependent colors; (value, grad)."""
    value = float(np.linalg.norm(colors))
    grad = colors / value if value > 1e-14 else np.zeros_like(colors)
    return value, grad


# ---------------------------------------------------------------------------
# high-frequency restoration


def gaussian_blur(img: np.ndarray, sigma_px: float) -> np.ndarray:
    """Separable Gaussian blur with symmetric padding."""
    radius = max(1, int(np.ceil(3.0 * sigma_px)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma_px) ** 2)
    k /= k.sum()
    out = np.asarray(img, dtype=np.float64)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[..., None]
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        p = np.pad(out, pad, mode="symmetric")
        from numpy.lib.stride_tricks import sliding_window_view
        win = sliding_window_view(p, 2 * radius + 1, axis=axis)
        out = np.einsum("...w,w->...", win, k)
    return out[..., 0] if squeeze else out


def highfreq_restore(delit: np.ndarray, target: np.ndarray, sigma_px: float = 4.0) -> np.ndarray:
    """Swap in the target's high-pass detail: blur(delit) + target - blur(target)."""
    if delit.shape != target.shape:
        raise ValueError("shape mismatch")
    return gaussian_blur(delit, sigma_px) + (target - gaussian_blur(target, sigma_px))


# ---------------------------------------------------------------------------
# texel -> surface rasterization and multi-view gather


@dataclass
class TexelSurface:
    """Per-texel surface attachment from rasterizing triangles in UV space."""

    tri: np.ndarray       # (R, R) triangle id, -1 where no chart covers
    position: np.ndarray  # (R, R, 3)
    normal: np.ndarray    # (R, R, 3) face normals
    mask: np.ndarray      # (R, R)


def rasterize_uv(mesh: Mesh, resolution: int) -> TexelSurface:
    """Map texel centers to surface points through the UV charts."""
    R = resolution
    tri_img = np.full((R, R), -1, dtype=np.int64)
    pos = np.zeros((R, R, 3))
    nrm = np.zeros((R, R, 3))
    fn = face_normals(mesh)
    corners = mesh.vertices[mesh.triangles]
    for t in range(mesh.num_triangles):
        uv = mesh.uvs[t] * R - 0.5  # texel coordinates
        lo = np.floor(uv.min(axis=0)).astype(int)
        hi = np.ceil(uv.max(axis=0)).astype(int) + 1
        x0, y0 = np.clip(lo, 0, R)
        x1, y1 = np.clip(hi, 0, R)
        if x1 <= x0 or y1 <= y0:
            continue
        xs = np.arange(x0, x1)
        ys = np.arange(y0, y1)
        px, py = np.meshgrid(xs, ys, indexing="xy")
        a, b, c = uv
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-12:
            continue
        w1 = ((px - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (py - a[1])) / det
        w2 = ((b[0] - a[0]) * (py - a[1]) - (px - a[0]) * (b[1] - a[1])) / det
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        ii, jj = np.nonzero(inside)
        rows = ys[ii]
        cols = xs[jj]
        bary = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
        p = np.einsum("pk,kc->pc", bary, corners[t])
        tri_img[rows, cols] = t
        pos[rows, cols] = p
        nrm[rows, cols] = fn[t]
    return TexelSurface(tri_img, pos, nrm, tri_img >= 0)


def uv_gather(delit_images: list, cameras: list, mesh: Mesh, resolution: int,
              bvh: Bvh | None = None, texels: TexelSurface | None = None,
              weight_power: float = 4.0):
    """Visibility-weighted mean of de-lit view data per texel.

    A view contributes where the texel's surface point faces the camera and
    the ray to the camera is unoccluded; its weight is cos(view angle)^4.
    Returns (texture (R,R,3), confidence (R,R))."""
    if bvh is None:
        bvh = Bvh(mesh)
    if texels is None:
        texels = rasterize_uv(mesh, resolution)
    R = resolution
    acc = np.zeros((R, R, 3))
    wsum = np.zeros((R, R))
    idx = np.nonzero(texels.mask)
    pts = texels.position[idx]
    nrm = texels.normal[idx]
    eps = 1e-4 * mesh.bbox_diagonal()
    for img, cam in zip(delit_images, cameras):
        to_cam = cam.center() - pts
        dist = np.linalg.norm(to_cam, axis=1, keepdims=True)
        d = to_cam / dist
        cosang = np.einsum("pk,pk->p", nrm, d)
        facing = cosang > 1e-3
        vis = np.zeros(len(pts), dtype=bool)
        if facing.any():
            v = ray_mesh_visible(bvh, pts[facing] + eps * nrm[facing], d[facing], eps=eps)
            vis[facing] = v.astype(bool)
        pix, depth = cam.project_points(pts)
        inb = (depth > 0) & (pix[:, 0] >= 0) & (pix[:, 0] <= cam.width) & \
              (pix[:, 1] >= 0) & (pix[:, 1] <= cam.height)
        use = facing & vis & inb
        if not use.any():
            continue
        uv_img = pix[use] / np.array([cam.width, cam.height])
        bidx, bw = bilinear_setup(uv_img, img.shape[0])
        vals = bilinear_sample(img, bidx, bw)
        w = np.maximum(cosang[use], 0.0) ** weight_power
        rows = idx[0][use]
        cols = idx[1][use]
        acc[rows, cols] += w[:, None] * vals
        wsum[rows, cols] += w
    tex = np.where(wsum[..., None] > 0, acc / np.maximum(wsum, 1e-12)[..., None], 0.0)
    return tex, wsum


def inpaint_pca(texture: np.ndarray, confidence: np.ndarray, mask: np.ndarray,
                basis: PcaTexture, feather_band: int = 8,
                conf_threshold: float = 0.0):
    """Replace masked / unseen texels with the basis reconstruction fitted on
    the trusted ones, feathering linearly over the transition band.

    Returns (texture', coeffs)."""
    from scipy.ndimage import distance_transform_edt

    R = basis.resolution
    replace = mask | (confidence <= conf_threshold)
    keep = ~replace
    modes = basis.modes
    M = len(modes)
    A = modes[:, keep, :].reshape(M, -1)
    rhs = (texture - basis.mean)[keep].reshape(-1)
    if A.shape[1] == 0:
        coeffs = np.zeros(M)
    else:
        G = A @ A.T
        b = A @ rhs
        coeffs = np.linalg.lstsq(G, b, rcond=None)[0]
    recon = basis.reconstruct(coeffs)
    if keep.any():
        dist = distance_transform_edt(keep)
    else:
        dist = np.zeros((R, R))
    w = np.clip(1.0 - dist / max(feather_band, 1e-9), 0.0, 1.0)
    out = (1.0 - w[..., None]) * texture + w[..., None] * recon
    return out, coeffs
