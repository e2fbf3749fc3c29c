import numpy as np
import pytest

from splatmesh.boundary import (FLAG_DEGENERATE, FLAG_OK, FLAG_SELF, boundary_max,
                                boundary_max_bwd, boundary_sum, knn_uv, single_root)
from splatmesh.mesh import Mesh
from oracles import bisect_density_root
from conftest import trivial_uvs


def random_cluster(rng, n=5):
    mu = rng.normal(size=(n, 3)) * 0.4
    A = rng.normal(size=(n, 3, 3)) * 0.4
    cov = A @ np.swapaxes(A, 1, 2) + 0.05 * np.eye(3)
    alpha = rng.uniform(0.6, 0.95, size=n)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    nbrs = np.stack([np.roll(np.arange(n), -i) for i in range(n)])
    return mu, cov, alpha, normals, nbrs


class TestSingleRoot:
    def test_unit_mahalanobis_shell(self):
        t = single_root(np.zeros(3), np.eye(3), 1.0, np.zeros(3),
                        np.array([0.0, 0.0, 1.0]), np.exp(-0.5))
        assert t == pytest.approx(1.0)

    def test_tau_above_alpha_none(self):
        assert single_root(np.zeros(3), np.eye(3), 0.5, np.zeros(3),
                           np.array([0.0, 0.0, 1.0]), 0.6) is None

    def test_against_bisection_oracle(self, rng):
        hits = 0
        for _ in range(200):
            A = rng.normal(size=(3, 3)) * 0.6
            cov = A @ A.T + 0.1 * np.eye(3)
            mu = rng.normal(size=3)
            alpha = rng.uniform(0.5, 1.0)
            o = mu + rng.normal(size=3) * 0.3
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            tau = rng.uniform(0.1, 0.4)
            t = single_root(mu, cov, alpha, o, d, tau)
            P = np.linalg.inv(cov)

            def f(tt):
                x = o + tt * d - mu
                return alpha * np.exp(-0.5 * x @ P @ x) - tau

            ref = bisect_density_root(f, -20.0, 100.0)
            if t is None:
                assert ref is None
            else:
                hits += 1
                assert abs(t - ref) <= 1e-8
        assert hits > 150


class TestKnnUv:
    def _mesh(self, rng, n=16):
        from splatmesh.mesh import icosphere
        v, f = icosphere(0)
        uvs = rng.uniform(0.05, 0.95, size=(len(f), 3, 2))
        return Mesh(v, f, uvs, np.zeros(len(f), dtype=np.int64))

    def test_k_zero_self_only(self, rng):
        m = self._mesh(rng)
        nbrs = knn_uv(m, 0)
        assert np.array_equal(nbrs[:, 0], np.arange(m.num_triangles))
        assert nbrs.shape == (m.num_triangles, 1)

    def test_matches_exhaustive_oracle(self, rng):
        m = self._mesh(rng)
        k = 4
        nbrs = knn_uv(m, k)
        cen = m.uvs.mean(axis=1)
        for i in range(m.num_triangles):
            d = np.linalg.norm(cen - cen[i], axis=1)
            d[i] = np.inf
            expected = sorted(range(len(d)), key=lambda j: (d[j], j))[:k]
            assert nbrs[i, 0] == i
            assert set(nbrs[i, 1:]) == set(expected)

    def test_self_always_included(self, rng):
        m = self._mesh(rng)
        nbrs = knn_uv(m, 3)
        assert np.all(nbrs[:, 0] == np.arange(m.num_triangles))


class TestBoundaryMax:
    def test_isotropic_self_shell(self):
        mu = np.zeros((1, 3))
        cov = np.eye(3)[None]
        res = boundary_max(mu, cov, np.array([1.0]), np.array([[0, 0, 1.0]]),
                           np.array([[0]]), np.exp(-0.5))
        assert res.t[0] == pytest.approx(1.0)
        assert np.allclose(res.x[0], [0, 0, 1])

    def test_larger_neighbor_wins(self):
        # neighbor at same center, double the extent: its root is farther
        mu = np.zeros((2, 3))
        cov = np.stack([np.eye(3), 4.0 * np.eye(3)])
        alpha = np.array([0.9, 0.9])
        nbrs = np.array([[0, 1], [1, 0]])
        normals = np.array([[0, 0, 1.0], [0, 0, 1.0]])
        res = boundary_max(mu, cov, alpha, normals, nbrs, 0.3)
        assert res.winner[0] == 1
        t_self = single_root(mu[0], cov[0], 0.9, mu[0], normals[0], 0.3)
        t_big = single_root(mu[1], cov[1], 0.9, mu[0], normals[0], 0.3)
        assert res.t[0] == pytest.approx(t_big)
        assert t_big > t_self

    def test_all_filtered_falls_back_to_self(self):
        # far-apart Gaussians never contain each other's centers
        mu = np.array([[0.0, 0, 0], [100.0, 0, 0]])
        cov = np.stack([np.eye(3)] * 2)
        alpha = np.array([0.9, 0.9])
        nbrs = np.array([[0, 1], [1, 0]])
        normals = np.array([[0, 0, 1.0], [0, 0, 1.0]])
        res = boundary_max(mu, cov, alpha, normals, nbrs, 0.3)
        assert np.all(res.flag == FLAG_OK)  # self passes the containment filter
        # with opacity below tau nothing qualifies anywhere -> degenerate
        res2 = boundary_max(mu, cov, np.array([0.2, 0.2]), normals, nbrs, 0.3)
        assert np.all(res2.flag == FLAG_DEGENERATE)
        assert np.all(res2.t == 0.0)

    def test_backward_fd(self, rng):
        mu, cov, alpha, normals, nbrs = random_cluster(rng)
        res = boundary_max(mu, cov, alpha, normals, nbrs, 0.3)
        dx = rng.normal(size=(5, 3))
        dmu, dcov, dalpha = boundary_max_bwd(res, dx)

        def loss():
            r = boundary_max(mu, cov, alpha, normals, nbrs, 0.3)
            return np.sum(r.x * dx)

        h = 1e-6
        for i in range(5):
            for k in range(3):
                old = mu[i, k]
                mu[i, k] = old + h
                lp = loss()
                mu[i, k] = old - h
                lm = loss()
                mu[i, k] = old
                fd = (lp - lm) / (2 * h)
                assert abs(fd - dmu[i, k]) / max(abs(fd), 1e-6) < 1e-5
            old = alpha[i]
            alpha[i] = old + h
            lp = loss()
            alpha[i] = old - h
            lm = loss()
            alpha[i] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - dalpha[i]) / max(abs(fd), 1e-6) < 1e-5


class TestBoundarySum:
    def test_single_gaussian_equals_single_root(self):
        mu = np.zeros((1, 3))
        cov = np.eye(3)[None] * 0.8
        res = boundary_sum(mu, cov, np.array([0.9]), np.array([[0, 0, 1.0]]),
                           np.array([[0]]), 0.3, tol=1e-10)
        t_ref = single_root(mu[0], cov[0], 0.9, mu[0], np.array([0, 0, 1.0]), 0.3)
        assert res.t[0] == pytest.approx(t_ref, abs=1e-8)

    def test_coincident_pair_closed_form(self):
        mu = np.zeros((2, 3))
        cov = np.stack([np.eye(3)] * 2)
        alpha = np.array([0.8, 0.8])
        nbrs = np.array([[0, 1], [1, 0]])
        normals = np.array([[0, 0, 1.0]] * 2)
        res = boundary_sum(mu, cov, alpha, normals, nbrs, 0.3, tol=1e-10)
        expect = np.sqrt(-2.0 * np.log(0.3 / 1.6))  # root of 2 alpha G = tau
        assert res.t[0] == pytest.approx(expect, abs=1e-8)
        t_single = single_root(mu[0], cov[0], 0.8, mu[0], normals[0], 0.3)
        assert res.t[0] > t_single

    def test_matches_ray_march_oracle(self, rng):
        for _ in range(10):
            mu, cov, alpha, normals, nbrs = random_cluster(rng)
            res = boundary_sum(mu, cov, alpha, normals, nbrs, 0.3, tol=1e-9)
            P = np.linalg.inv(cov)
            for i in range(5):
                if res.flag[i] != FLAG_OK:
                    continue
                ts = np.linspace(0, 20, 10000)
                x = mu[i] + ts[:, None] * normals[i]
                f = np.zeros(len(ts))
                for j in range(5):
                    d = x - mu[j]
                    f += alpha[j] * np.exp(-0.5 * np.einsum("ti,ij,tj->t", d, P[j], d))
                above = np.nonzero(f >= 0.3)[0]
                lo, hi = ts[above[-1]], ts[min(above[-1] + 1, len(ts) - 1)]
                for _ in range(60):
                    m = 0.5 * (lo + hi)
                    xm = mu[i] + m * normals[i]
                    fm = sum(alpha[j] * np.exp(-0.5 * (xm - mu[j]) @ P[j] @ (xm - mu[j]))
                             for j in range(5))
                    if fm < 0.3:
                        hi = m
                    else:
                        lo = m
                assert abs(res.t[i] - 0.5 * (lo + hi)) <= 1e-5

    def test_below_threshold_at_origin_flagged(self):
        mu = np.zeros((1, 3))
        cov = np.eye(3)[None]
        res = boundary_sum(mu, cov, np.array([0.2]), np.array([[0, 0, 1.0]]),
                           np.array([[0]]), 0.5)
        assert res.flag[0] == FLAG_DEGENERATE and res.t[0] == 0.0


class TestOrderingInvariant:
    def test_sum_geq_max_geq_self(self, rng):
        for trial in range(20):
            mu, cov, alpha, normals, nbrs = random_cluster(rng)
            r_max = boundary_max(mu, cov, alpha, normals, nbrs, 0.3)
            r_sum = boundary_sum(mu, cov, alpha, normals, nbrs, 0.3, tol=1e-9)
            for i in range(5):
                t_self = single_root(mu[i], cov[i], alpha[i], mu[i], normals[i], 0.3)
                if r_max.flag[i] == FLAG_OK and r_sum.flag[i] == FLAG_OK and t_self:
                    assert r_sum.t[i] >= r_max.t[i] - 1e-7
                    assert r_max.t[i] >= t_self - 1e-9

    def test_roots_scale_linearly(self, rng):
        mu, cov, alpha, normals, nbrs = random_cluster(rng)
        r1 = boundary_sum(mu, cov, alpha, normals, nbrs, 0.3, tol=1e-10)
        k = 2.5
        r2 = boundary_sum(mu * k, cov * k * k, alpha, normals, nbrs, 0.3,
                          tol=1e-10)
        live = r1.flag == FLAG_OK
        assert np.abs(r2.t[live] - k * r1.t[live]).max() < 1e-6
