"""Outer boundary points of Gaussians along triangle-normal rays.

A boundary point is the farthest ray parameter where Gaussian density
(single, max-over-neighbors, or summed-over-neighbors) equals the
threshold tau. The single-Gaussian crossing is a quadratic in the ray
parameter and solves in closed form; the summed variant brackets the
outermost crossing and bisects. Max-variant points are differentiable via
the implicit function theorem with the winning neighbor held fixed.

Flags: 0 = regular, 1 = fell back to the self root (no neighbor passed the
center-containment filter), 2 = degenerate (no root; excluded from use).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

FLAG_OK = 0
FLAG_SELF = 1
FLAG_DEGENERATE = 2


def single_root(mu: np.ndarray, cov: np.ndarray, alpha: float,
                origin: np.ndarray, direction: np.ndarray, tau: float):
    """Largest t with alpha * G(origin + t * direction) = tau, or None."""
    if tau >= alpha:
        return None
    P = np.linalg.inv(cov)
    o = np.asarray(origin, dtype=np.float64) - mu
    d = np.asarray(direction, dtype=np.float64)
    a = d @ P @ d
    b = 2.0 * (d @ P @ o)
    c = o @ P @ o
    Q = -2.0 * np.log(tau / alpha)
    disc = b * b - 4.0 * a * (c - Q)
    if disc < 0.0:
        return None
    return float((-b + np.sqrt(disc)) / (2.0 * a))


def knn_uv(mesh: Mesh, k: int) -> np.ndarray:
    """Neighbor table N(i): self plus the k nearest triangle UV centroids.

    Ties are broken by triangle index; returns (F, k+1) with column 0 = i."""
    cen = mesh.uvs.mean(axis=1)  # (F, 2)
    F = len(cen)
    k = min(k, F - 1)
    d = np.linalg.norm(cen[:, None, :] - cen[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    idx = np.lexsort((np.broadcast_to(np.arange(F), (F, F)), d), axis=1)[:, :k]
    return np.concatenate([np.arange(F, dtype=np.int64)[:, None], idx.astype(np.int64)], axis=1)


def _pair_quadratics(mu, inv_cov, origins, dirs, nbrs):
    """Per-(i, j) quadratic q(t) = a t^2 + b t + c along ray i for Gaussian j."""
    j = nbrs  # (N, K)
    o = origins[:, None, :] - mu[j]          # (N, K, 3)
    d = np.broadcast_to(dirs[:, None, :], o.shape)
    P = inv_cov[j]                           # (N, K, 3, 3)
    Pd = np.einsum("nkij,nkj->nki", P, d)
    Po = np.einsum("nkij,nkj->nki", P, o)
    a = np.einsum("nki,nki->nk", d, Pd)
    b = 2.0 * np.einsum("nki,nki->nk", d, Po)
    c = np.einsum("nki,nki->nk", o, Po)
    return a, b, c


@dataclass
class BoundaryResult:
    t: np.ndarray        # (N,)
    x: np.ndarray        # (N, 3)
    winner: np.ndarray   # (N,) index of the Gaussian whose root won
    flag: np.ndarray     # (N,) FLAG_*
    cache: dict | None = None


def boundary_max(mu: np.ndarray, cov: np.ndarray, alpha: np.ndarray,
                 normals: np.ndarray, nbrs: np.ndarray, tau: float) -> BoundaryResult:
    """Max-combination boundary points for every Gaussian.

    Neighbors j enter only if they contain the ray origin at the threshold
    (alpha_j G_j(mu_i) >= tau); the largest single root among them wins.
    With no qualifying neighbor the self root is used (flag 1) and failing
    that t = 0 (flag 2)."""
    n = len(mu)
    inv_cov = np.linalg.inv(cov)
    a, b, c = _pair_quadratics(mu, inv_cov, mu, normals, nbrs)
    al = alpha[nbrs]
    with np.errstate(divide="ignore", invalid="ignore"):
        Q = -2.0 * np.log(np.where(al > tau, tau / al, 1.0))
    solvable = al > tau
    contains = solvable & (al * np.exp(-0.5 * c) >= tau)
    disc = b * b - 4.0 * a * (c - Q)
    has_root = contains & (disc >= 0.0)
    t_roots = np.where(has_root, (-b + np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a), -np.inf)

    t = t_roots.max(axis=1)
    arg = t_roots.argmax(axis=1)
    winner = nbrs[np.arange(n), arg]
    flag = np.where(has_root.any(axis=1), FLAG_OK, FLAG_DEGENERATE)

    # fallback: self root when no neighbor qualified
    need = flag == FLAG_DEGENERATE
    if need.any():
        a0, b0, c0 = a[:, 0], b[:, 0], c[:, 0]  # column 0 is the self pair
        ok0 = (alpha > tau)
        Q0 = np.where(ok0, -2.0 * np.log(np.where(ok0, tau / alpha, 1.0)), 0.0)
        d0 = b0 * b0 - 4.0 * a0 * (c0 - Q0)
        ok0 &= d0 >= 0.0
        t0 = np.where(ok0, (-b0 + np.sqrt(np.maximum(d0, 0.0))) / (2.0 * a0), 0.0)
        use = need & ok0
        t = np.where(use, t0, np.where(need, 0.0, t))
        winner = np.where(need, np.arange(n), winner)
        flag = np.where(use, FLAG_SELF, flag)
    x = mu + t[:, None] * normals
    cache = {"inv_cov": inv_cov, "mu": mu, "alpha": alpha, "normals": normals, "tau": tau}
    return BoundaryResult(t, x, winner, flag, cache)


def boundary_max_bwd(res: BoundaryResult, dx: np.ndarray):
    """Backward of boundary_max via implicit differentiation of the root.

    Returns (dmu (N,3), dcov (N,3,3), dalpha (N,)). Degenerate entries and
    grazing roots (normal nearly tangent to the level set) pass no gradient."""
    cache = res.cache
    mu, alpha, normals = cache["mu"], cache["alpha"], cache["normals"]
    inv_cov = cache["inv_cov"]
    n = len(mu)
    # x = mu_i + t n_i: the direct identity term applies to every entry,
    # including degenerate ones where t is pinned at 0.
    dmu = dx.copy()
    dcov = np.zeros((n, 3, 3))
    dalpha = np.zeros(n)
    live = res.flag != FLAG_DEGENERATE
    if not live.any():
        return dmu, dcov, dalpha
    idx = np.nonzero(live)[0]
    j = res.winner[idx]
    delta = res.x[idx] - mu[j]                       # x - mu_j
    g = np.einsum("nij,nj->ni", inv_cov[j], delta)   # P (x - mu_j)
    ng = np.einsum("ni,ni->n", normals[idx], g)
    safe = np.abs(ng) > 1e-12
    idx, j, delta, g, ng = idx[safe], j[safe], delta[safe], g[safe], ng[safe]
    s = np.einsum("ni,ni->n", dx[idx], normals[idx])  # dL/dt
    # dt/dmu_i = -g / (n.g), dt/dmu_j = g / (n.g),
    # dt/dSigma_j = g g^T / (2 n.g), dt/dalpha_j = 1 / (alpha_j n.g)
    np.add.at(dmu, idx, -(s / ng)[:, None] * g)
    np.add.at(dmu, j, (s / ng)[:, None] * g)
    np.add.at(dcov, j, (s / (2.0 * ng))[:, None, None] * np.einsum("ni,nj->nij", g, g))
    np.add.at(dalpha, j, s / (alpha[j] * ng))
    return dmu, dcov, dalpha


def boundary_sum(mu: np.ndarray, cov: np.ndarray, alpha: np.ndarray,
                 normals: np.ndarray, nbrs: np.ndarray, tau: float,
                 tol: float = 1e-6, n_scan: int = 256) -> BoundaryResult:
    """Summed-density boundary points (outermost crossing of the neighbor sum).

    The bracket upper end sits beyond every neighbor's along-ray tail (sum
    provably below tau there); a coarse outermost-upcrossing scan followed
    by bisection refines t to within tol."""
    n = len(mu)
    inv_cov = np.linalg.inv(cov)
    a, b, c = _pair_quadratics(mu, inv_cov, mu, normals, nbrs)
    al = alpha[nbrs]

    def f(ts):  # ts: (N, S) -> (N, S)
        q = a[:, None, :] * ts[:, :, None] ** 2 + b[:, None, :] * ts[:, :, None] + c[:, None, :]
        return np.sum(al[:, None, :] * np.exp(-0.5 * q), axis=2)

    f0 = f(np.zeros((n, 1)))[:, 0]
    flagged = f0 < tau

    # per-pair peak location and a tail offset guaranteeing sum < tau
    t_peak = -b / (2.0 * a)
    K = nbrs.shape[1]
    c_tail = np.sqrt(2.0 * np.log(max(K, 1) * np.maximum(al.max(axis=1), tau + 1e-9) / tau)) + 1.0
    t_hi = np.max(t_peak + c_tail[:, None] / np.sqrt(a), axis=1)
    t_hi = np.maximum(t_hi, 1e-6)

    # single roots give a lower bracket end where the sum is >= tau
    with np.errstate(divide="ignore", invalid="ignore"):
        Q = -2.0 * np.log(np.where(al > tau, tau / al, 1.0))
    disc = b * b - 4.0 * a * (c - Q)
    has = (al > tau) & (disc >= 0.0)
    roots = np.where(has, (-b + np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a), -np.inf)
    t_lo = np.where(has.any(axis=1), roots.max(axis=1), 0.0)
    t_lo = np.maximum(t_lo, 0.0)

    # outermost upcrossing: scan down from t_hi, take the first f >= tau.
    # f(t_lo) >= tau holds analytically (the sum dominates the single term
    # that equals tau there), so pin the low end against roundoff.
    ts = t_lo[:, None] + (t_hi - t_lo)[:, None] * np.linspace(0.0, 1.0, n_scan)[None, :]
    vals = f(ts) >= tau
    vals[:, 0] |= ~flagged
    # last index where f >= tau (scan is ascending in t)
    rev = vals[:, ::-1]
    first_rev = rev.argmax(axis=1)
    any_cross = vals.any(axis=1)
    hi_idx = n_scan - 1 - first_rev
    lo = ts[np.arange(n), hi_idx]
    hi = np.where(hi_idx + 1 < n_scan, ts[np.arange(n), np.minimum(hi_idx + 1, n_scan - 1)], t_hi)
    lo = np.where(any_cross & ~flagged, lo, 0.0)
    hi = np.where(any_cross & ~flagged, hi, 0.0)
    flagged |= ~any_cross

    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = f(mid[:, None])[:, 0] < tau
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
        if np.all(hi - lo <= tol):
            break
    t = np.where(flagged, 0.0, 0.5 * (lo + hi))
    x = mu + t[:, None] * normals
    flag = np.where(flagged, FLAG_DEGENERATE, FLAG_OK)
    return BoundaryResult(t, x, np.arange(n), flag, None)
