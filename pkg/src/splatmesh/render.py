"""Multi-channel Gaussian splat rasterizer with hand-derived gradients.

Three rendering modes share one compositing core:
  - perspective world-space splatting (front-to-back alpha compositing),
  - orthographic UV-space splatting sorted by the W (normal-offset) axis,
  - order-independent direct summation over 2D Gaussians.

The backward pass reverse-accumulates through the compositing recurrence
without ever dividing by (1 - w), so fully opaque contributions are safe.
An accumulated-opacity channel is obtained by compositing a constant one,
which keeps the one-hot label channels summing to opacity bitwise.

Pixel (row, col) has center (col + 0.5, row + 0.5) in screen units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .mesh import Mesh, face_normals
from .bvh import Bvh
from .rotations import axis_angle_to_rot, axis_angle_to_rot_bwd

# Anti-alias covariance floor (pixels^2) and Mahalanobis cutoff, both
# overridable per call.
COV_DILATION = 0.3
CUTOFF_SIGMA = 3.0


@dataclass
class Camera:
    """Pinhole camera; rot/trans give the world-to-camera transform and are
    the optimizable extrinsics (axis-angle + translation)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def R(self) -> np.ndarray:
        return axis_angle_to_rot(self.rot)

    def center(self) -> np.ndarray:
        R = self.R()
        return -R.T @ self.trans

    def pixel_rays(self):
        """World-space origin (3,) and unit directions (H, W, 3) through all
        pixel centers."""
        R = self.R()
        js = np.arange(self.width) + 0.5
        is_ = np.arange(self.height) + 0.5
        xs = (js - self.cx) / self.fx
        ys = (is_ - self.cy) / self.fy
        d_cam = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], np.ones((1, 1))), axis=-1)
        d_world = d_cam @ R  # R^T applied to rows
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        return self.center(), d_world

    def project_points(self, pts: np.ndarray):
        """World points -> (pix (N,2), depth (N,))."""
        R = self.R()
        xc = pts @ R.T + self.trans
        z = xc[:, 2]
        px = self.fx * xc[:, 0] / z + self.cx
        py = self.fy * xc[:, 1] / z + self.cy
        return np.stack([px, py], axis=1), z

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rot": self.rot.tolist(), "trans": self.trans.tolist(),
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                      np.asarray(d["rot"]), np.asarray(d["trans"]))


@dataclass
class ProjectionTape:
    """Saved intermediates of project() needed by its backward pass."""

    cam: Camera
    R: np.ndarray
    mu: np.ndarray
    cov: np.ndarray
    x_cam: np.ndarray
    J: np.ndarray
    M: np.ndarray
    valid: np.ndarray


def project(mu: np.ndarray, cov: np.ndarray, cam: Camera, near: float = 0.01,
            dilation: float = COV_DILATION):
    """Perspective projection of world Gaussians to screen space.

    Returns (mu2d (N,2), cov2d (N,2,2), depth (N,), tape); Gaussians behind
    the near plane are culled via tape.valid and get zeroed outputs.
    """
    R = cam.R()
    x_cam = mu @ R.T + cam.trans
    z = x_cam[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    mu2d = np.stack([cam.fx * x_cam[:, 0] / zs + cam.cx,
                     cam.fy * x_cam[:, 1] / zs + cam.cy], axis=1)
    n = len(mu)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x_cam[:, 0] / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * x_cam[:, 1] / zs ** 2
    M = J @ R[None]
    cov2d = M @ cov @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    mu2d[~valid] = 0.0
    tape = ProjectionTape(cam, R, mu, cov, x_cam, J, M, valid)
    return mu2d, cov2d, z, tape


def project_bwd(tape: ProjectionTape, dmu2d: np.ndarray, dcov2d: np.ndarray):
    """Backward of project: returns (dmu, dcov, dcam_rot, dcam_trans)."""
    cam, R = tape.cam, tape.R
    x_cam, J, M, cov = tape.x_cam, tape.J, tape.M, tape.cov
    v = tape.valid
    dmu2d = np.where(v[:, None], dmu2d, 0.0)
    dcov2d = np.where(v[:, None, None], dcov2d, 0.0)

    dcov = np.einsum("nji,njk,nkl->nil", M, dcov2d, M)
    sym = dcov2d + np.swapaxes(dcov2d, 1, 2)
    dM = sym @ M @ cov
    dJ = dM @ R.T[None]
    dR = np.einsum("nji,njk->ik", J, dM)

    x, y, z = x_cam[:, 0], x_cam[:, 1], np.where(v, x_cam[:, 2], 1.0)
    dx_cam = np.einsum("nji,nj->ni", J, dmu2d)
    dx_cam[:, 0] += dJ[:, 0, 2] * (-cam.fx / z ** 2)
    dx_cam[:, 1] += dJ[:, 1, 2] * (-cam.fy / z ** 2)
    dx_cam[:, 2] += (dJ[:, 0, 0] * (-cam.fx / z ** 2)
                     + dJ[:, 1, 1] * (-cam.fy / z ** 2)
                     + dJ[:, 0, 2] * (2 * cam.fx * x / z ** 3)
                     + dJ[:, 1, 2] * (2 * cam.fy * y / z ** 3))
    dx_cam = np.where(v[:, None], dx_cam, 0.0)

    dmu = dx_cam @ R
    dR += dx_cam.T @ tape.mu
    dtrans = dx_cam.sum(axis=0)
    drot = axis_angle_to_rot_bwd(cam.rot, dR)
    return dmu, dcov, drot, dtrans


def view_colors(sh_coeffs: np.ndarray, mu: np.ndarray, cam_center: np.ndarray, degree: int):
    """Per-Gaussian view-dependent color from SH coefficients.

    sh_coeffs: (N, 3, K); view direction is taken from each Gaussian's mean.
    Returns (colors (N, 3), cache)."""
    from .sh import sh_basis
    d = mu - cam_center
    r = np.linalg.norm(d, axis=1, keepdims=True)
    vdir = d / r
    Y = sh_basis(vdir, degree)
    colors = np.einsum("nk,nck->nc", Y, sh_coeffs)
    return colors, {"vdir": vdir, "r": r, "Y": Y, "coeffs": sh_coeffs, "degree": degree}


def view_colors_bwd(cache: dict, dcolors: np.ndarray):
    """Backward of view_colors: returns (dsh (N,3,K), dmu (N,3), dcenter (3,))."""
    from .sh import sh_basis_grad
    Y, coeffs, vdir, r = cache["Y"], cache["coeffs"], cache["vdir"], cache["r"]
    dsh = np.einsum("nc,nk->nck", dcolors, Y)
    dY = np.einsum("nc,nck->nk", dcolors, coeffs)
    gY = sh_basis_grad(vdir, cache["degree"])  # (N, K, 3)
    dv = np.einsum("nk,nki->ni", dY, gY)
    # v = d / |d|: dL/dd = (I - v v^T) dv / |d|
    dd = (dv - vdir * np.sum(dv * vdir, axis=1, keepdims=True)) / r
    return dsh, dd, -dd.sum(axis=0)


@dataclass
class CompositeTape:
    height: int
    width: int
    n_channels: int
    entries: list = field(default_factory=list)  # (gauss idx, bbox, w, T_before)
    inv_cov: np.ndarray = None
    mu2d: np.ndarray = None
    alpha: np.ndarray = None
    q_max: float = 9.0
    # compiled-kernel tape (used when numba is available)
    kind: str = "numpy"
    order: np.ndarray = None
    bbox: tuple = None
    w_store: np.ndarray = None
    t_store: np.ndarray = None
    offsets: np.ndarray = None


def _inv2x2(c: np.ndarray):
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    inv = np.empty_like(c)
    inv[:, 0, 0] = c[:, 1, 1]
    inv[:, 1, 1] = c[:, 0, 0]
    inv[:, 0, 1] = -c[:, 0, 1]
    inv[:, 1, 0] = -c[:, 1, 0]
    return inv / det[:, None, None], det


def _bboxes(mu2d, cov2d, width, height, cutoff):
    eig_max = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1]) + np.sqrt(
        np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2, 0.0))
    radius = cutoff * np.sqrt(np.maximum(eig_max, 1e-12)) + 1.0
    x0 = np.clip(np.floor(mu2d[:, 0] - radius).astype(int), 0, width)
    x1 = np.clip(np.ceil(mu2d[:, 0] + radius).astype(int) + 1, 0, width)
    y0 = np.clip(np.floor(mu2d[:, 1] - radius).astype(int), 0, height)
    y1 = np.clip(np.ceil(mu2d[:, 1] + radius).astype(int) + 1, 0, height)
    return x0, x1, y0, y1


def composite(mu2d: np.ndarray, cov2d: np.ndarray, alpha: np.ndarray,
              channels: np.ndarray, order: np.ndarray, width: int, height: int,
              cutoff: float = CUTOFF_SIGMA):
    """Front-to-back alpha compositing of arbitrary per-Gaussian channels.

    order lists Gaussian indices front to back; each contributes
    w = alpha * exp(-q/2) within the cutoff-sigma Mahalanobis ellipse.
    Returns (out (H, W, C), tape)."""
    n, C = channels.shape
    inv_cov, _ = _inv2x2(cov2d)
    x0, x1, y0, y1 = _bboxes(mu2d, cov2d, width, height, cutoff)
    q_max = cutoff * cutoff
    order = np.ascontiguousarray(order, dtype=np.int64)
    if K.HAVE_NUMBA:
        pinv = np.ascontiguousarray(
            np.stack([inv_cov[:, 0, 0], inv_cov[:, 0, 1], inv_cov[:, 1, 1]], axis=1))
        out, w_store, t_store, offsets = K.composite_forward(
            np.ascontiguousarray(mu2d), pinv, np.ascontiguousarray(alpha),
            np.ascontiguousarray(channels), order, x0, x1, y0, y1,
            q_max, height, width)
        tape = CompositeTape(height, width, C, [], inv_cov, mu2d, alpha, q_max,
                             kind="numba", order=order, bbox=(x0, x1, y0, y1),
                             w_store=w_store, t_store=t_store, offsets=offsets)
        return out, tape
    out = np.zeros((height, width, C))
    T = np.ones((height, width))
    tape = CompositeTape(height, width, C, [], inv_cov, mu2d, alpha, q_max)
    for i in order:
        i = int(i)
        if x1[i] <= x0[i] or y1[i] <= y0[i] or alpha[i] <= 0.0:
            continue
        sl = (slice(y0[i], y1[i]), slice(x0[i], x1[i]))
        dx = (np.arange(x0[i], x1[i]) + 0.5) - mu2d[i, 0]
        dy = (np.arange(y0[i], y1[i]) + 0.5) - mu2d[i, 1]
        P = inv_cov[i]
        q = (P[0, 0] * dx * dx)[None, :] + (P[1, 1] * dy * dy)[:, None] \
            + (2.0 * P[0, 1]) * dy[:, None] * dx[None, :]
        w = np.where(q <= q_max, alpha[i] * np.exp(-0.5 * q), 0.0)
        T_before = T[sl].copy()
        out[sl] += (T_before * w)[:, :, None] * channels[i]
        T[sl] = T_before * (1.0 - w)
        tape.entries.append((i, sl, dx, dy, w, T_before))
    return out, tape


def composite_bwd(tape: CompositeTape, channels: np.ndarray, g_out: np.ndarray):
    """Backward of composite.

    Returns dict with dchannels (N, C), dalpha (N,), dmu2d (N, 2),
    dcov2d (N, 2, 2). Walks the saved entries back to front, maintaining the
    suffix blend B so no division by (1 - w) is needed."""
    if tape.kind == "numba":
        x0, x1, y0, y1 = tape.bbox
        pinv = np.ascontiguousarray(
            np.stack([tape.inv_cov[:, 0, 0], tape.inv_cov[:, 0, 1],
                      tape.inv_cov[:, 1, 1]], axis=1))
        dch, dalpha, dmu2d, dpinv = K.composite_backward(
            np.ascontiguousarray(channels), tape.order, x0, x1, y0, y1,
            tape.w_store, tape.t_store, tape.offsets,
            np.ascontiguousarray(g_out), np.ascontiguousarray(tape.alpha),
            pinv, np.ascontiguousarray(tape.mu2d))
        dP = np.zeros((len(channels), 2, 2))
        dP[:, 0, 0] = dpinv[:, 0]
        dP[:, 0, 1] = dpinv[:, 1]
        dP[:, 1, 1] = dpinv[:, 2]
        Pm = tape.inv_cov
        dcov2d = -np.swapaxes(Pm, 1, 2) @ dP @ np.swapaxes(Pm, 1, 2)
        return {"dchannels": dch, "dalpha": dalpha, "dmu2d": dmu2d, "dcov2d": dcov2d}
    n = len(channels)
    C = tape.n_channels
    dchannels = np.zeros((n, C))
    dalpha = np.zeros(n)
    dmu2d = np.zeros((n, 2))
    dP = np.zeros((n, 2, 2))
    B = np.zeros((tape.height, tape.width, C))
    for i, sl, dx, dy, w, T_before in reversed(tape.entries):
        g = g_out[sl]  # (h, w, C)
        x_i = channels[i]
        dchannels[i] += np.einsum("hwc,hw->c", g, T_before * w)
        # dL/dw = sum_c g_c T (x_c - B_c)
        dw = T_before * (g @ x_i - np.einsum("hwc,hwc->hw", g, B[sl]))
        B[sl] = w[:, :, None] * x_i + (1.0 - w)[:, :, None] * B[sl]
        if tape.alpha[i] > 0.0:
            dalpha[i] += float(np.sum(dw * w) / tape.alpha[i])
        dq = -0.5 * w * dw
        P = tape.inv_cov[i]
        gx = P[0, 0] * dx[None, :] + P[0, 1] * dy[:, None]
        gy = P[0, 1] * dx[None, :] + P[1, 1] * dy[:, None]
        dmu2d[i, 0] += -2.0 * np.sum(dq * gx)
        dmu2d[i, 1] += -2.0 * np.sum(dq * gy)
        # q reads P00, P11, and (doubled) P01 only, so the adjoint w.r.t. the
        # full inverse matrix is asymmetric before chaining through inv().
        dP[i, 0, 0] += np.sum(dq * dx[None, :] * dx[None, :] * np.ones_like(dy)[:, None])
        dP[i, 1, 1] += np.sum(dq * dy[:, None] * dy[:, None] * np.ones_like(dx)[None, :])
        dP[i, 0, 1] += 2.0 * np.sum(dq * dy[:, None] * dx[None, :])
    Pm = tape.inv_cov
    dcov2d = -np.swapaxes(Pm, 1, 2) @ dP @ np.swapaxes(Pm, 1, 2)
    return {"dchannels": dchannels, "dalpha": dalpha, "dmu2d": dmu2d, "dcov2d": dcov2d}


def depth_order(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Front-to-back index order among valid Gaussians (stable sort)."""
    idx = np.nonzero(valid)[0]
    return idx[np.argsort(depth[idx], kind="stable")]


def render_ortho_uvw(mu_uvw: np.ndarray, cov_uvw: np.ndarray, alpha: np.ndarray,
                     channels: np.ndarray, resolution: int,
                     cutoff: float = CUTOFF_SIGMA, dilation: float = COV_DILATION):
    """Orthographic texture-space splat over the unit UV square.

    W (the third coordinate) only orders the blend: larger W (outer) first.
    Returns (out (R, R, C), tape); tape feeds composite_bwd, and the ortho
    screen-space chain back to UVW parameters is the fixed linear map
    mu2d = resolution * uv - 0.5 applied by the caller."""
    res = resolution
    mu2d = mu_uvw[:, :2] * res - 0.5
    cov2d = cov_uvw[:, :2, :2] * res * res
    cov2d = cov2d.copy()
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    order = np.argsort(-mu_uvw[:, 2], kind="stable")
    out, tape = composite(mu2d, cov2d, alpha, channels, order, res, res, cutoff)
    return out, tape


def render_sum2d(mu2d: np.ndarray, cov2d: np.ndarray, alpha: np.ndarray,
                 channels: np.ndarray, width: int, height: int,
                 keys: np.ndarray | None = None, cutoff: float = CUTOFF_SIGMA):
    """Order-independent direct summation: pixel = sum_i w_i x_i.

    Accumulation runs in ascending key order (default: index), so permuting
    the input Gaussians reproduces the image bitwise. Returns (out, tape)."""
    n, C = channels.shape
    order = np.ascontiguousarray(
        np.argsort(keys if keys is not None else np.arange(n), kind="stable"),
        dtype=np.int64)
    inv_cov, _ = _inv2x2(cov2d)
    x0, x1, y0, y1 = _bboxes(mu2d, cov2d, width, height, cutoff)
    q_max = cutoff * cutoff
    if K.HAVE_NUMBA:
        pinv = np.ascontiguousarray(
            np.stack([inv_cov[:, 0, 0], inv_cov[:, 0, 1], inv_cov[:, 1, 1]], axis=1))
        out = K.sum2d_forward(np.ascontiguousarray(mu2d), pinv,
                              np.ascontiguousarray(alpha),
                              np.ascontiguousarray(channels), order,
                              x0, x1, y0, y1, q_max, height, width)
        tape = CompositeTape(height, width, C, [], inv_cov, mu2d, alpha, q_max,
                             kind="numba", order=order, bbox=(x0, x1, y0, y1))
        return out, tape
    out = np.zeros((height, width, C))
    tape = CompositeTape(height, width, C, [], inv_cov, mu2d, alpha, q_max)
    for i in order:
        i = int(i)
        if x1[i] <= x0[i] or y1[i] <= y0[i] or alpha[i] <= 0.0:
            continue
        sl = (slice(y0[i], y1[i]), slice(x0[i], x1[i]))
        dx = (np.arange(x0[i], x1[i]) + 0.5) - mu2d[i, 0]
        dy = (np.arange(y0[i], y1[i]) + 0.5) - mu2d[i, 1]
        P = inv_cov[i]
        q = (P[0, 0] * dx * dx)[None, :] + (P[1, 1] * dy * dy)[:, None] \
            + (2.0 * P[0, 1]) * dy[:, None] * dx[None, :]
        w = np.where(q <= q_max, alpha[i] * np.exp(-0.5 * q), 0.0)
        out[sl] += w[:, :, None] * channels[i]
        tape.entries.append((i, sl, dx, dy, w, None))
    return out, tape


def render_sum2d_bwd(tape: CompositeTape, channels: np.ndarray, g_out: np.ndarray):
    """Backward of render_sum2d (no transmittance recurrence)."""
    if tape.kind == "numba":
        x0, x1, y0, y1 = tape.bbox
        pinv = np.ascontiguousarray(
            np.stack([tape.inv_cov[:, 0, 0], tape.inv_cov[:, 0, 1],
                      tape.inv_cov[:, 1, 1]], axis=1))
        dch, dalpha, dmu2d, dpinv = K.sum2d_backward(
            np.ascontiguousarray(channels), tape.order, x0, x1, y0, y1,
            np.ascontiguousarray(g_out), np.ascontiguousarray(tape.alpha),
            pinv, np.ascontiguousarray(tape.mu2d), tape.q_max)
        dP = np.zeros((len(channels), 2, 2))
        dP[:, 0, 0] = dpinv[:, 0]
        dP[:, 0, 1] = dpinv[:, 1]
        dP[:, 1, 1] = dpinv[:, 2]
        Pm = tape.inv_cov
        dcov2d = -np.swapaxes(Pm, 1, 2) @ dP @ np.swapaxes(Pm, 1, 2)
        return {"dchannels": dch, "dalpha": dalpha, "dmu2d": dmu2d, "dcov2d": dcov2d}
    n = len(channels)
    dchannels = np.zeros((n, tape.n_channels))
    dalpha = np.zeros(n)
    dmu2d = np.zeros((n, 2))
    dP = np.zeros((n, 2, 2))
    for i, sl, dx, dy, w, _ in tape.entries:
        g = g_out[sl]
        dchannels[i] += np.einsum("hwc,hw->c", g, w)
        dw = g @ channels[i]
        if tape.alpha[i] > 0.0:
            dalpha[i] += float(np.sum(dw * w) / tape.alpha[i])
        dq = -0.5 * w * dw
        P = tape.inv_cov[i]
        gx = P[0, 0] * dx[None, :] + P[0, 1] * dy[:, None]
        gy = P[0, 1] * dx[None, :] + P[1, 1] * dy[:, None]
        dmu2d[i, 0] += -2.0 * np.sum(dq * gx)
        dmu2d[i, 1] += -2.0 * np.sum(dq * gy)
        dP[i, 0, 0] += np.sum(dq * dx[None, :] ** 2 * np.ones_like(dy)[:, None])
        dP[i, 1, 1] += np.sum(dq * dy[:, None] ** 2 * np.ones_like(dx)[None, :])
        dP[i, 0, 1] += 2.0 * np.sum(dq * dy[:, None] * dx[None, :])
    Pm = tape.inv_cov
    dcov2d = -np.swapaxes(Pm, 1, 2) @ dP @ np.swapaxes(Pm, 1, 2)
    return {"dchannels": dchannels, "dalpha": dalpha, "dmu2d": dmu2d, "dcov2d": dcov2d}


@dataclass
class GBuffer:
    """Per-pixel surface attributes from ray casting the mesh."""

    tri: np.ndarray       # (H, W) triangle id, -1 off-mesh
    depth: np.ndarray     # (H, W) ray parameter, inf off-mesh
    bary: np.ndarray      # (H, W, 3) barycentric weights
    position: np.ndarray  # (H, W, 3)
    normal: np.ndarray    # (H, W, 3) interpolated vertex normals
    uv: np.ndarray        # (H, W, 2)
    mask: np.ndarray      # (H, W) bool

    @property
    def front_facing(self) -> np.ndarray:
        return self.mask


def triangle_id_render(mesh: Mesh, cam: Camera, bvh: Bvh | None = None):
    """Nearest front-facing triangle id and depth per pixel (-1 / inf misses).

    'Visible' triangles own at least one pixel and face the camera."""
    if bvh is None:
        bvh = Bvh(mesh)
    origin, dirs = cam.pixel_rays()
    H, W = dirs.shape[:2]
    flat = dirs.reshape(-1, 3)
    tri, t, _ = bvh.first_hit(np.broadcast_to(origin, flat.shape), flat)
    hit = tri >= 0
    fn = face_normals(mesh)
    facing = np.zeros_like(hit)
    facing[hit] = np.einsum("rk,rk->r", fn[tri[hit]], flat[hit]) < 0.0
    tri = np.where(hit & facing, tri, -1)
    t = np.where(tri >= 0, t, np.inf)
    return tri.reshape(H, W), t.reshape(H, W)


def visible_triangles(mesh: Mesh, cam: Camera, bvh: Bvh | None = None) -> np.ndarray:
    ids, _ = triangle_id_render(mesh, cam, bvh)
    owned = np.unique(ids[ids >= 0])
    return owned


def make_gbuffer(mesh: Mesh, cam: Camera, bvh: Bvh | None = None) -> GBuffer:
    """Ray-cast geometry buffer: position, interpolated normal, UV per pixel."""
    from .mesh import vertex_normals
    if bvh is None:
        bvh = Bvh(mesh)
    origin, dirs = cam.pixel_rays()
    H, W = dirs.shape[:2]
    flat = dirs.reshape(-1, 3)
    tri, t, uv2 = bvh.first_hit(np.broadcast_to(origin, flat.shape), flat)
    hit = tri >= 0
    fn = face_normals(mesh)
    facing = np.zeros_like(hit)
    facing[hit] = np.einsum("rk,rk->r", fn[tri[hit]], flat[hit]) < 0.0
    ok = hit & facing
    tri = np.where(ok, tri, -1)
    bary = np.zeros((H * W, 3))
    bary[ok, 1] = uv2[ok, 0]
    bary[ok, 2] = uv2[ok, 1]
    bary[ok, 0] = 1.0 - uv2[ok, 0] - uv2[ok, 1]
    pos = np.zeros((H * W, 3))
    pos[ok] = origin + flat[ok] * t[ok][:, None]
    vn = vertex_normals(mesh)
    nrm = np.zeros((H * W, 3))
    nrm[ok] = np.einsum("rk,rkc->rc", bary[ok], vn[mesh.triangles[tri[ok]]])
    ln = np.linalg.norm(nrm[ok], axis=1, keepdims=True)
    nrm[ok] /= np.where(ln > 1e-14, ln, 1.0)
    uv = np.zeros((H * W, 2))
    uv[ok] = np.einsum("rk,rkc->rc", bary[ok], mesh.uvs[tri[ok]])
    return GBuffer(
        tri=tri.reshape(H, W),
        depth=np.where(ok, t, np.inf).reshape(H, W),
        bary=bary.reshape(H, W, 3),
        position=pos.reshape(H, W, 3),
        normal=nrm.reshape(H, W, 3),
        uv=uv.reshape(H, W, 2),
        mask=ok.reshape(H, W),
    )
