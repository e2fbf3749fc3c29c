"""Compiled inner loops (numba) for compositing and ray traversal.

Semantics are identical to the pure-numpy paths in render.py / bvh.py; the
test suite holds both against the same brute-force oracles. Everything is
float64 and sequential, so results are run-to-run deterministic.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco if not (args and callable(args[0])) else args[0]


@njit(cache=True)
def composite_forward(mu2d, pinv, alpha, channels, order, x0, x1, y0, y1,
                      q_max, height, width):
    """Front-to-back blend. Returns (out, w_store, t_store, offsets) where
    w/T for order[k] live in the flat stores at [offsets[k], offsets[k+1])."""
    n_draw = len(order)
    C = channels.shape[1]
    out = np.zeros((height, width, C))
    T = np.ones((height, width))
    sizes = np.zeros(n_draw + 1, dtype=np.int64)
    for k in range(n_draw):
        i = order[k]
        w_ = max(x1[i] - x0[i], 0)
        h_ = max(y1[i] - y0[i], 0)
        sizes[k + 1] = sizes[k] + w_ * h_
    w_store = np.zeros(sizes[n_draw])
    t_store = np.zeros(sizes[n_draw])
    for k in range(n_draw):
        i = order[k]
        a = alpha[i]
        if a <= 0.0:
            continue
        p00 = pinv[i, 0]
        p01 = pinv[i, 1]
        p11 = pinv[i, 2]
        mx = mu2d[i, 0]
        my = mu2d[i, 1]
        base = sizes[k]
        wdt = x1[i] - x0[i]
        for row in range(y0[i], y1[i]):
            dy = (row + 0.5) - my
            for col in range(x0[i], x1[i]):
                dx = (col + 0.5) - mx
                q = p00 * dx * dx + 2.0 * p01 * dx * dy + p11 * dy * dy
                idx = base + (row - y0[i]) * wdt + (col - x0[i])
                t_store[idx] = T[row, col]
                if q <= q_max:
                    w = a * np.exp(-0.5 * q)
                    w_store[idx] = w
                    tw = T[row, col] * w
                    for c in range(C):
                        out[row, col, c] += tw * channels[i, c]
                    T[row, col] *= (1.0 - w)
    return out, w_store, t_store, sizes


@njit(cache=True)
def composite_backward(channels, order, x0, x1, y0, y1, w_store, t_store,
                       offsets, g_out, alpha, pinv, mu2d):
    """Reverse sweep maintaining the suffix blend B (no 1/(1-w) division)."""
    n, C = channels.shape
    height, width = g_out.shape[0], g_out.shape[1]
    dchannels = np.zeros((n, C))
    dalpha = np.zeros(n)
    dmu2d = np.zeros((n, 2))
    dpinv = np.zeros((n, 3))
    B = np.zeros((height, width, C))
    for k in range(len(order) - 1, -1, -1):
        i = order[k]
        a = alpha[i]
        if a <= 0.0:
            continue
        base = offsets[k]
        wdt = x1[i] - x0[i]
        mx = mu2d[i, 0]
        my = mu2d[i, 1]
        p00 = pinv[i, 0]
        p01 = pinv[i, 1]
        p11 = pinv[i, 2]
        for row in range(y0[i], y1[i]):
            dy = (row + 0.5) - my
            for col in range(x0[i], x1[i]):
                dx = (col + 0.5) - mx
                idx = base + (row - y0[i]) * wdt + (col - x0[i])
                w = w_store[idx]
                T = t_store[idx]
                gd = 0.0
                gb = 0.0
                for c in range(C):
                    g = g_out[row, col, c]
                    dchannels[i, c] += g * T * w
                    gd += g * channels[i, c]
                    gb += g * B[row, col, c]
                    B[row, col, c] = w * channels[i, c] + (1.0 - w) * B[row, col, c]
                if w > 0.0:
                    dw = T * (gd - gb)
                    dalpha[i] += dw * w / a
                    dq = -0.5 * w * dw
                    dmu2d[i, 0] += -2.0 * dq * (p00 * dx + p01 * dy)
                    dmu2d[i, 1] += -2.0 * dq * (p01 * dx + p11 * dy)
                    dpinv[i, 0] += dq * dx * dx
                    dpinv[i, 1] += 2.0 * dq * dx * dy
                    dpinv[i, 2] += dq * dy * dy
    return dchannels, dalpha, dmu2d, dpinv


@njit(cache=True)
def sum2d_forward(mu2d, pinv, alpha, channels, order, x0, x1, y0, y1,
                  q_max, height, width):
    n_draw = len(order)
    C = channels.shape[1]
    out = np.zeros((height, width, C))
    for k in range(n_draw):
        i = order[k]
        a = alpha[i]
        if a <= 0.0:
            continue
        p00 = pinv[i, 0]
        p01 = pinv[i, 1]
        p11 = pinv[i, 2]
        mx = mu2d[i, 0]
        my = mu2d[i, 1]
        for row in range(y0[i], y1[i]):
            dy = (row + 0.5) - my
            for col in range(x0[i], x1[i]):
                dx = (col + 0.5) - mx
                q = p00 * dx * dx + 2.0 * p01 * dx * dy + p11 * dy * dy
                if q <= q_max:
                    w = a * np.exp(-0.5 * q)
                    for c in range(C):
                        out[row, col, c] += w * channels[i, c]
    return out


@njit(cache=True)
def sum2d_backward(channels, order, x0, x1, y0, y1, g_out, alpha, pinv, mu2d, q_max):
    n, C = channels.shape
    dchannels = np.zeros((n, C))
    dalpha = np.zeros(n)
    dmu2d = np.zeros((n, 2))
    dpinv = np.zeros((n, 3))
    for k in range(len(order)):
        i = order[k]
        a = alpha[i]
        if a <= 0.0:
            continue
        p00 = pinv[i, 0]
        p01 = pinv[i, 1]
        p11 = pinv[i, 2]
        mx = mu2d[i, 0]
        my = mu2d[i, 1]
        for row in range(y0[i], y1[i]):
            dy = (row + 0.5) - my
            for col in range(x0[i], x1[i]):
                dx = (col + 0.5) - mx
                q = p00 * dx * dx + 2.0 * p01 * dx * dy + p11 * dy * dy
                if q <= q_max:
                    w = a * np.exp(-0.5 * q)
                    gd = 0.0
                    for c in range(C):
                        g = g_out[row, col, c]
                        dchannels[i, c] += g * w
                        gd += g * channels[i, c]
                    dalpha[i] += gd * w / a
                    dq = -0.5 * w * gd
                    dmu2d[i, 0] += -2.0 * dq * (p00 * dx + p01 * dy)
                    dmu2d[i, 1] += -2.0 * dq * (p01 * dx + p11 * dy)
                    dpinv[i, 0] += dq * dx * dx
                    dpinv[i, 1] += 2.0 * dq * dx * dy
                    dpinv[i, 2] += dq * dy * dy
    return dchannels, dalpha, dmu2d, dpinv


@njit(cache=True)
def bvh_any_hit(node_lo, node_hi, node_left, node_right, node_start, node_count,
                leaf_tris, v0, e1, e2, origins, dirs, t_min):
    """Per-ray stack traversal; True where any triangle is hit beyond t_min."""
    n = len(origins)
    occluded = np.zeros(n, dtype=np.bool_)
    stack = np.zeros(64, dtype=np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if abs(dx) > 1e-30 else (1e30 if dx >= 0 else -1e30)
        iy = 1.0 / dy if abs(dy) > 1e-30 else (1e30 if dy >= 0 else -1e30)
        iz = 1.0 / dz if abs(dz) > 1e-30 else (1e30 if dz >= 0 else -1e30)
        tm = t_min[r]
        sp = 0
        stack[0] = 0
        sp = 1
        hit = False
        while sp > 0 and not hit:
            sp -= 1
            node = stack[sp]
            # slab test
            tx1 = (node_lo[node, 0] - ox) * ix
            tx2 = (node_hi[node, 0] - ox) * ix
            tn = min(tx1, tx2)
            tf = max(tx1, tx2)
            ty1 = (node_lo[node, 1] - oy) * iy
            ty2 = (node_hi[node, 1] - oy) * iy
            tn = max(tn, min(ty1, ty2))
            tf = min(tf, max(ty1, ty2))
            tz1 = (node_lo[node, 2] - oz) * iz
            tz2 = (node_hi[node, 2] - oz) * iz
            tn = max(tn, min(tz1, tz2))
            tf = min(tf, max(tz1, tz2))
            if tf < max(tn, 0.0):
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for j in range(node_count[node]):
                    t_idx = leaf_tris[s + j]
                    # Moller-Trumbore
                    px = dy * e2[t_idx, 2] - dz * e2[t_idx, 1]
                    py = dz * e2[t_idx, 0] - dx * e2[t_idx, 2]
                    pz = dx * e2[t_idx, 1] - dy * e2[t_idx, 0]
                    det = e1[t_idx, 0] * px + e1[t_idx, 1] * py + e1[t_idx, 2] * pz
                    if abs(det) < 1e-14:
                        continue
                    inv = 1.0 / det
                    sx = ox - v0[t_idx, 0]
                    sy = oy - v0[t_idx, 1]
                    sz = oz - v0[t_idx, 2]
                    u = (sx * px + sy * py + sz * pz) * inv
                    if u < 0.0:
                        continue
                    qx = sy * e1[t_idx, 2] - sz * e1[t_idx, 1]
                    qy = sz * e1[t_idx, 0] - sx * e1[t_idx, 2]
                    qz = sx * e1[t_idx, 1] - sy * e1[t_idx, 0]
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[t_idx, 0] * qx + e2[t_idx, 1] * qy + e2[t_idx, 2] * qz) * inv
                    if t > tm:
                        hit = True
                        break
            else:
                stack[sp] = node_left[node]
                sp += 1
                stack[sp] = node_right[node]
                sp += 1
        occluded[r] = hit
    return occluded


@njit(cache=True)
def bvh_first_hit(node_lo, node_hi, node_left, node_right, node_start, node_count,
                  leaf_tris, v0, e1, e2, origins, dirs, t_min):
    """Nearest hit per ray: (tri, t, u, v); tri = -1 on miss."""
    n = len(origins)
    best_tri = np.full(n, -1, dtype=np.int64)
    best_t = np.full(n, np.inf)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    stack = np.zeros(64, dtype=np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if abs(dx) > 1e-30 else (1e30 if dx >= 0 else -1e30)
        iy = 1.0 / dy if abs(dy) > 1e-30 else (1e30 if dy >= 0 else -1e30)
        iz = 1.0 / dz if abs(dz) > 1e-30 else (1e30 if dz >= 0 else -1e30)
        tm = t_min[r]
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            tx1 = (node_lo[node, 0] - ox) * ix
            tx2 = (node_hi[node, 0] - ox) * ix
            tn = min(tx1, tx2)
            tf = max(tx1, tx2)
            ty1 = (node_lo[node, 1] - oy) * iy
            ty2 = (node_hi[node, 1] - oy) * iy
            tn = max(tn, min(ty1, ty2))
            tf = min(tf, max(ty1, ty2))
            tz1 = (node_lo[node, 2] - oz) * iz
            tz2 = (node_hi[node, 2] - oz) * iz
            tn = max(tn, min(tz1, tz2))
            tf = min(tf, max(tz1, tz2))
            if tf < max(tn, 0.0) or tn >= best_t[r]:
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for j in range(node_count[node]):
                    t_idx = leaf_tris[s + j]
                    px = dy * e2[t_idx, 2] - dz * e2[t_idx, 1]
                    py = dz * e2[t_idx, 0] - dx * e2[t_idx, 2]
                    pz = dx * e2[t_idx, 1] - dy * e2[t_idx, 0]
                    det = e1[t_idx, 0] * px + e1[t_idx, 1] * py + e1[t_idx, 2] * pz
                    if abs(det) < 1e-14:
                        continue
                    inv = 1.0 / det
                    sx = ox - v0[t_idx, 0]
                    sy = oy - v0[t_idx, 1]
                    sz = oz - v0[t_idx, 2]
                    u = (sx * px + sy * py + sz * pz) * inv
                    if u < 0.0:
                        continue
                    qx = sy * e1[t_idx, 2] - sz * e1[t_idx, 1]
                    qy = sz * e1[t_idx, 0] - sx * e1[t_idx, 2]
                    qz = sx * e1[t_idx, 1] - sy * e1[t_idx, 0]
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[t_idx, 0] * qx + e2[t_idx, 1] * qy + e2[t_idx, 2] * qz) * inv
                    if t > tm and t < best_t[r]:
                        best_t[r] = t
                        best_tri[r] = t_idx
                        best_u[r] = u
                        best_v[r] = v
            else:
                stack[sp] = node_left[node]
                sp += 1
                stack[sp] = node_right[node]
                sp += 1
    return best_tri, best_t, best_u, best_v
