"""Training losses on rendered images and Gaussian parameters.

Every loss returns (value, gradient) so the training loops stay explicit;
the finite-difference harness in splatmesh.optim arbitrates the gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import EdgeAdjacency


@dataclass
class LossWeights:
    """Stage weights; center/boundary take (camera pass, geometry pass) values."""

    dssim: float = 0.2
    scale: float = 50.0
    center_camera: float = 10.0
    center_geometry: float = 20.0
    normal: float = 10.0
    boundary_camera: float = 50.0
    boundary_geometry: float = 500.0
    seg: float = 50.0
    eyes: float = 20.0
    lighting: float = 1e-3
    rotation: float = 0.2
    blending: float = 0.1
    view: float = 1e-3

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json(d: dict) -> "LossWeights":
        allowed = set(LossWeights().__dict__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return LossWeights(**d)


# ---------------------------------------------------------------------------
# image loss: (1 - lambda) L1 + lambda (1 - SSIM)

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()
_HALF = len(_KERNEL) // 2


def _mirror_index(n: int, half: int) -> np.ndarray:
    # np.pad(mode="symmetric") index map: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    idx = np.concatenate([np.arange(half - 1, -1, -1), np.arange(n), np.arange(n - 1, n - 1 - half, -1)])
    return idx


def _window(x: np.ndarray) -> np.ndarray:
    """Separable 11-tap Gaussian window average with symmetric padding.

    Works on (H, W) or (H, W, C); scipy's 'reflect' mode matches the
    symmetric padding the adjoint folds back."""
    from scipy.ndimage import correlate1d
    rows = correlate1d(x, _KERNEL, axis=0, mode="reflect")
    return correlate1d(rows, _KERNEL, axis=1, mode="reflect")


def _conv_full(g: np.ndarray, axis: int) -> np.ndarray:
    """Full 1-D convolution with the (symmetric) window kernel along an axis."""
    from scipy.ndimage import correlate1d
    k = len(_KERNEL)
    pad = [(0, 0)] * g.ndim
    pad[axis] = (k - 1, k - 1)
    full = correlate1d(np.pad(g, pad), _KERNEL, axis=axis, mode="constant")
    sl = [slice(None)] * g.ndim
    sl[axis] = slice(_HALF, -_HALF)
    return full[tuple(sl)]


def _fold_axis(full: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Fold symmetric-pad margins back: adjoint of np.pad(mode='symmetric')."""
    sl = [slice(None)] * full.ndim

    def take(s):
        sl[axis] = s
        return full[tuple(sl)]

    out = take(slice(_HALF, _HALF + n)).copy()
    lo = take(slice(0, _HALF))
    hi = take(slice(_HALF + n, _HALF + n + _HALF))
    osl = [slice(None)] * full.ndim
    osl[axis] = slice(0, _HALF)
    out[tuple(osl)] += np.flip(lo, axis=axis)
    osl[axis] = slice(n - _HALF, n)
    out[tuple(osl)] += np.flip(hi, axis=axis)
    return out


def _window_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of _window (symmetric kernel: full convolution + pad fold)."""
    h, w = g.shape[:2]
    full = _conv_full(_conv_full(g, 0), 1)
    return _fold_axis(_fold_axis(full, h, 0), w, 1)


def ssim(render: np.ndarray, target: np.ndarray):
    """Mean SSIM over pixels and channels; returns (value, d/d render).

    11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2."""
    if render.shape != target.shape:
        raise ValueError("shape mismatch")
    x = render if render.ndim == 3 else render[..., None]
    y = target if target.ndim == 3 else target[..., None]
    H, W, C = x.shape
    inv_n = 1.0 / (H * W * C)
    mx, my = _window(x), _window(y)
    sx2 = _window(x * x)
    sxy = _window(x * y)
    sy2 = _window(y * y)
    vx = sx2 - mx * mx
    vy = sy2 - my * my
    cxy = sxy - mx * my
    A1 = 2 * mx * my + _SSIM_C1
    B1 = mx * mx + my * my + _SSIM_C1
    A2 = 2 * cxy + _SSIM_C2
    B2 = vx + vy + _SSIM_C2
    f = (A1 * A2) / (B1 * B2)
    total = float(f.sum() * inv_n)
    dA1 = inv_n * A2 / (B1 * B2)
    dB1 = -inv_n * f / B1
    dA2 = inv_n * A1 / (B1 * B2)
    dB2 = -inv_n * f / B2
    dmx = dA1 * 2 * my + dB1 * 2 * mx + dA2 * (-2 * my) + dB2 * (-2 * mx)
    grad = (_window_adjoint(dmx)
            + 2 * x * _window_adjoint(dB2)
            + y * _window_adjoint(2 * dA2))
    return total, (grad if render.ndim == 3 else grad[..., 0])


def image_loss(render: np.ndarray, target: np.ndarray, lam: float = 0.2):
    """(1 - lam) * mean|diff| + lam * (1 - SSIM); returns (value, d/d render)."""
    if render.shape != target.shape:
        raise ValueError(f"shape mismatch {render.shape} vs {target.shape}")
    diff = render - target
    l1 = np.abs(diff).mean()
    dl1 = np.sign(diff) / diff.size
    s, ds = ssim(render, target)
    value = (1.0 - lam) * l1 + lam * (1.0 - s)
    grad = (1.0 - lam) * dl1 - lam * ds
    return float(value), grad


# ---------------------------------------------------------------------------
# Laplacian-style soft constraint on per-Gaussian features


def adjacency_arrays(adj: EdgeAdjacency):
    """Flatten neighbor lists to (src, dst, inv_count) for vector math."""
    src, dst = [], []
    counts = np.array([len(n) for n in adj.neighbors], dtype=np.int64)
    for i, nbrs in enumerate(adj.neighbors):
        src.extend([i] * len(nbrs))
        dst.extend(nbrs)
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64), counts


def laplacian_feature_loss(z: np.ndarray, adj: EdgeAdjacency | tuple):
    """sum_i || z_i - mean_{j in E(i)} z_j ||^2; isolated Gaussians contribute 0.

    Returns (value, d/dz)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64).T).T  # (N, D)
    if z.ndim == 1:
        z = z[:, None]
    src, dst, counts = adj if isinstance(adj, tuple) else adjacency_arrays(adj)
    n = len(z)
    mean = np.zeros_like(z)
    np.add.at(mean, src, z[dst])
    has = counts > 0
    mean[has] /= counts[has][:, None]
    r = np.where(has[:, None], z - mean, 0.0)
    value = float(np.sum(r * r))
    grad = 2.0 * r
    # each residual r_i also depends on neighbors j: -2 r_i / |E(i)| flows to z_j
    contrib = np.where(has[:, None], 2.0 * r / np.maximum(counts, 1)[:, None], 0.0)
    np.add.at(grad, dst, -contrib[src])
    return value, grad


# ---------------------------------------------------------------------------
# segmentation supervision


def segmentation_loss(seg: np.ndarray, alpha: np.ndarray, label_image: np.ndarray,
                      ignore_mask: np.ndarray, background_label: int = 0):
    """Mean squared distance between blended one-hot labels and targets.

    seg: (H, W, L) composited one-hot channels (rows sum to alpha); the
    background label absorbs the transmittance deficit 1 - alpha before the
    comparison. Ignored pixels contribute nothing; an empty P gives 0.
    Returns (value, dseg, dalpha)."""
    H, W, L = seg.shape
    if label_image.max() >= L:
        raise ValueError(f"label id {int(label_image.max())} out of range for {L} labels")
    P = ~ignore_mask
    n_p = int(P.sum())
    if n_p == 0:
        return 0.0, np.zeros_like(seg), np.zeros_like(alpha)
    full = seg.copy()
    full[..., background_label] += 1.0 - alpha
    onehot = np.zeros_like(seg)
    ii, jj = np.nonzero(P)
    onehot[ii, jj, label_image[ii, jj]] = 1.0
    r = np.where(P[..., None], full - onehot, 0.0)
    value = float(np.sum(r * r)) / n_p
    dseg = 2.0 * r / n_p
    dalpha = -dseg[..., background_label]
    return value, dseg, dalpha


# ---------------------------------------------------------------------------
# eyeball / eye-socket interference


def eyes_loss(socket_pts: np.ndarray, eyeball_pts: np.ndarray):
    """Penalize socket boundary points that sit inside the eyeball shell.

    For each socket point, the nearest eyeball boundary point is found; n
    points from the eyeball center (mean of all eyeball points) to it, and
    max((nearest - socket) . n, 0) is averaged over socket points.
    Returns (value, dsocket, deyeball)."""
    s = np.asarray(socket_pts, dtype=np.float64)
    e = np.asarray(eyeball_pts, dtype=np.float64)
    if len(s) == 0 or len(e) == 0:
        raise ValueError("eyes_loss needs non-empty socket and eyeball point sets")
    ns, ne = len(s), len(e)
    center = e.mean(axis=0)
    d2 = np.linalg.norm(e[None, :, :] - s[:, None, :], axis=-1)
    j_star = np.argmin(d2, axis=1)
    near = e[j_star]
    u = near - center
    un = np.linalg.norm(u, axis=1, keepdims=True)
    un = np.where(un > 1e-14, un, 1.0)
    nvec = u / un
    v = np.sum((near - s) * nvec, axis=1)
    active = v > 0.0
    value = float(v[active].sum()) / ns
    dv = active.astype(np.float64) / ns
    ds = -dv[:, None] * nvec
    de = np.zeros_like(e)
    # explicit dependence of v on the nearest point
    np.add.at(de, j_star, dv[:, None] * nvec)
    # dependence through n = u/|u|, u = near - center
    m = dv[:, None] * ((near - s) - nvec * v[:, None]) / un
    np.add.at(de, j_star, m)
    de -= m.sum(axis=0) / ne
    return value, ds, de


# ---------------------------------------------------------------------------
# visibility dropout


def visibility_dropout(visible_tris: np.ndarray, tri_of_gaussian: np.ndarray,
                       p_drop: float, seed: int) -> np.ndarray:
    """Active mask: visible-triangle Gaussians always on, hidden ones kept
    with probability 1 - p_drop (deterministic under the seed)."""
    rng = np.random.default_rng(seed)
    visible = np.isin(tri_of_gaussian, visible_tris)
    keep_hidden = rng.random(len(tri_of_gaussian)) >= p_drop
    return visible | keep_hidden
