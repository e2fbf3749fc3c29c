"""Independent brute-force references used across the test suite.

These deliberately avoid the package's accelerated code paths: plain loops,
no BVH, no tiling, no saved tapes.
"""

import numpy as np


def naive_composite(mu2d, cov2d, alpha, channels, order, width, height, q_max=9.0):
    """Per-pixel front-to-back blend over all Gaussians, no culling."""
    C = channels.shape[1]
    out = np.zeros((height, width, C))
    for row in range(height):
        for col in range(width):
            p = np.array([col + 0.5, row + 0.5])
            T = 1.0
            acc = np.zeros(C)
            for i in order:
                d = p - mu2d[i]
                q = d @ np.linalg.inv(cov2d[i]) @ d
                if q <= q_max:
                    w = alpha[i] * np.exp(-0.5 * q)
                    acc += T * w * channels[i]
                    T *= 1.0 - w
            out[row, col] = acc
    return out


def naive_sum2d(mu2d, cov2d, alpha, channels, width, height, q_max=9.0):
    C = channels.shape[1]
    out = np.zeros((height, width, C))
    for row in range(height):
        for col in range(width):
            p = np.array([col + 0.5, row + 0.5])
            for i in range(len(alpha)):
                d = p - mu2d[i]
                q = d @ np.linalg.inv(cov2d[i]) @ d
                if q <= q_max:
                    out[row, col] += alpha[i] * np.exp(-0.5 * q) * channels[i]
    return out


def ray_triangle_hit(origin, direction, v0, v1, v2, t_min=0.0):
    """Scalar Moller-Trumbore; returns t or None."""
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(direction, e2)
    det = e1 @ p
    if abs(det) < 1e-14:
        return None
    inv = 1.0 / det
    s = origin - v0
    u = (s @ p) * inv
    if u < 0.0:
        return None
    q = np.cross(s, e1)
    v = (direction @ q) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2 @ q) * inv
    return t if t > t_min else None


def brute_force_visible(mesh, origin, direction, eps):
    """1 if no triangle blocks the ray beyond eps."""
    for tri in mesh.triangles:
        t = ray_triangle_hit(origin, direction, *mesh.vertices[tri], t_min=eps)
        if t is not None:
            return 0
    return 1


def brute_force_first_hit(mesh, origin, direction, t_min=0.0):
    """(tri index, t) of the nearest hit, or (-1, inf)."""
    best = (-1, np.inf)
    for i, tri in enumerate(mesh.triangles):
        t = ray_triangle_hit(origin, direction, *mesh.vertices[tri], t_min=t_min)
        if t is not None and t < best[1]:
            best = (i, t)
    return best


def bisect_density_root(f, t_lo, t_hi, iters=80):
    """Outermost root of f(t) = 0 located by scan + bisection."""
    ts = np.linspace(t_lo, t_hi, 2001)
    vals = np.array([f(t) for t in ts])
    above = np.nonzero(vals >= 0)[0]
    if len(above) == 0:
        return None
    k = above[-1]
    lo, hi = ts[k], ts[min(k + 1, len(ts) - 1)]
    for _ in range(iters):
        m = 0.5 * (lo + hi)
        if f(m) < 0:
            hi = m
        else:
            lo = m
    return 0.5 * (lo + hi)


def real_sh_reference(l, m, dirs):
    """Real spherical harmonics from scipy's associated Legendre functions
    (graphics convention: no Condon-Shortley phase)."""
    from scipy.special import lpmv
    from math import factorial
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    theta = np.arccos(np.clip(z, -1, 1))
    phi = np.arctan2(y, x)
    am = abs(m)
    K = np.sqrt((2 * l + 1) / (4 * np.pi) * factorial(l - am) / factorial(l + am))
    # lpmv includes the Condon-Shortley phase; (-1)^m removes it
    P = lpmv(am, l, np.cos(theta)) * (-1.0) ** am
    if m > 0:
        return np.sqrt(2.0) * K * P * np.cos(am * phi)
    if m < 0:
        return np.sqrt(2.0) * K * P * np.sin(am * phi)
    return K * P
