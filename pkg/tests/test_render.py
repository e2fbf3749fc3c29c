import numpy as np
import pytest

from splatmesh.bvh import Bvh
from splatmesh.mesh import Mesh, face_normals
from splatmesh.render import (Camera, composite, composite_bwd, depth_order,
                              project, project_bwd, render_ortho_uvw, render_sum2d,
                              render_sum2d_bwd, triangle_id_render, view_colors,
                              view_colors_bwd, make_gbuffer)
from conftest import trivial_uvs
from oracles import naive_composite, naive_sum2d, brute_force_first_hit


def random_screen_scene(rng, n=6, size=16, channels=4):
    mu2d = rng.uniform(0, size, size=(n, 2))
    A = rng.normal(size=(n, 2, 2))
    cov2d = A @ np.swapaxes(A, 1, 2) + 2.0 * np.eye(2)
    alpha = rng.uniform(0.2, 0.95, size=n)
    ch = rng.normal(size=(n, channels))
    return mu2d, cov2d, alpha, ch


class TestComposite:
    def test_single_opaque_gaussian_center(self):
        mu2d = np.array([[8.0, 8.0]])
        cov2d = np.array([np.eye(2) * 4.0])
        out, _ = composite(mu2d, cov2d, np.array([1.0]), np.array([[0.7]]),
                           np.array([0]), 16, 16)
        # pixel center (8.0, 8.0) falls >1/2 px from mu... use the peak texel
        assert out[..., 0].max() == pytest.approx(0.7, abs=0.05)
        assert out[8, 8, 0] > 0.65

    def test_opaque_front_hides_back(self):
        mu2d = np.tile([[8.0, 8.0]], (2, 1))
        cov2d = np.tile(np.eye(2)[None] * 4.0, (2, 1, 1))
        alpha = np.array([1.0, 0.9])
        ch = np.array([[1.0], [5.0]])
        out, _ = composite(mu2d - 0.5, cov2d, alpha, ch, np.array([0, 1]), 16, 16)
        # at the exact center w=1 for the front Gaussian: back invisible
        assert out[7, 7, 0] == pytest.approx(1.0)

    def test_matches_naive_reference(self, rng):
        for _ in range(5):
            mu2d, cov2d, alpha, ch = random_screen_scene(rng)
            order = np.arange(len(alpha))
            out, _ = composite(mu2d, cov2d, alpha, ch, order, 16, 16)
            ref = naive_composite(mu2d, cov2d, alpha, ch, order, 16, 16)
            assert np.abs(out - ref).max() <= 1e-6

    def test_transmittance_monotone(self, rng):
        mu2d, cov2d, alpha, _ = random_screen_scene(rng, n=8)
        ones = np.ones((8, 1))
        # alpha channel after k front-most gaussians is non-decreasing in k
        prev = np.zeros((16, 16))
        for k in range(1, 9):
            out, _ = composite(mu2d, cov2d, alpha, ones, np.arange(k), 16, 16)
            cur = out[..., 0]
            assert np.all(cur >= prev - 1e-12)
            assert cur.min() >= 0.0 and cur.max() <= 1.0
            prev = cur

    def test_seg_channels_sum_to_alpha(self, rng):
        # one-hot channels partition each contribution, so their sum equals
        # the accumulated alpha up to float re-association across labels
        n = 7
        mu2d, cov2d, alpha, _ = random_screen_scene(rng, n=n)
        labels = rng.integers(0, 3, size=n)
        onehot = np.zeros((n, 3))
        onehot[np.arange(n), labels] = 1.0
        ch = np.concatenate([onehot, np.ones((n, 1))], axis=1)
        out, _ = composite(mu2d, cov2d, alpha, ch, np.arange(n), 16, 16)
        assert np.abs(out[..., :3].sum(axis=-1) - out[..., 3]).max() < 1e-13

    def test_backward_fd(self, rng):
        mu2d, cov2d, alpha, ch = random_screen_scene(rng)
        order = np.arange(len(alpha))
        out, tape = composite(mu2d, cov2d, alpha, ch, order, 16, 16)
        g = rng.normal(size=out.shape)
        grads = composite_bwd(tape, ch, g)
        h = 1e-5

        def loss(m, c, a, x):
            o, _ = composite(m, c, a, x, order, 16, 16)
            return np.sum(o * g)

        worst = 0.0
        for i in range(len(alpha)):
            for arr, gr, idx in ((mu2d, grads["dmu2d"], (i, 0)),
                                 (cov2d, grads["dcov2d"], (i, 0, 1)),
                                 (alpha, grads["dalpha"], (i,)),
                                 (ch, grads["dchannels"], (i, 1))):
                old = arr[idx]
                arr[idx] = old + h
                lp = loss(mu2d, cov2d, alpha, ch)
                arr[idx] = old - h
                lm = loss(mu2d, cov2d, alpha, ch)
                arr[idx] = old
                fd = (lp - lm) / (2 * h)
                worst = max(worst, abs(fd - gr[idx]) / max(abs(fd), 1e-8))
        assert worst < 1e-5


class TestProject:
    def _cam(self, **kw):
        d = dict(fx=100.0, fy=100.0, cx=8.0, cy=8.0, width=16, height=16,
                 rot=np.zeros(3), trans=np.zeros(3))
        d.update(kw)
        return Camera(**d)

    def test_on_axis_analytic_jacobian(self):
        cam = self._cam()
        sigma = 0.03
        mu = np.array([[0.0, 0.0, 1.0]])
        cov = np.array([np.eye(3) * sigma ** 2])
        _, cov2d, _, _ = project(mu, cov, cam)
        assert cov2d[0, 0, 0] == pytest.approx((100 * sigma) ** 2 + 0.3)
        assert cov2d[0, 1, 1] == pytest.approx((100 * sigma) ** 2 + 0.3)

    def test_doubling_depth_halves_projected_std(self):
        cam = self._cam()
        cov = np.array([np.eye(3) * 0.01, np.eye(3) * 0.01])
        mu = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
        _, cov2d, _, _ = project(mu, cov, cam, dilation=0.0)
        assert np.sqrt(cov2d[0, 0, 0] / cov2d[1, 0, 0]) == pytest.approx(2.0)

    def test_behind_camera_culled(self):
        cam = self._cam()
        mu = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
        cov = np.tile(np.eye(3)[None] * 0.01, (2, 1, 1))
        _, _, depth, tape = project(mu, cov, cam)
        assert not tape.valid[0] and tape.valid[1]
        order = depth_order(depth, tape.valid)
        assert 0 not in order

    def test_backward_fd(self, rng):
        cam = self._cam(rot=rng.normal(size=3) * 0.2,
                        trans=np.array([0.1, -0.2, 4.0]))
        n = 4
        mu = rng.normal(size=(n, 3)) * 0.4
        A = rng.normal(size=(n, 3, 3)) * 0.2
        cov = A @ np.swapaxes(A, 1, 2) + 0.05 * np.eye(3)
        dmu2d = rng.normal(size=(n, 2))
        dcov2d = rng.normal(size=(n, 2, 2))
        mu2d, cov2d, _, tape = project(mu, cov, cam)
        dmu, dcov, drot, dtrans = project_bwd(tape, dmu2d, dcov2d)

        def loss(mu_, cov_, rot_, trans_):
            c = Camera(cam.fx, cam.fy, cam.cx, cam.cy, 16, 16, rot_, trans_)
            m, cc, _, _ = project(mu_, cov_, c)
            return np.sum(m * dmu2d) + np.sum(cc * dcov2d)

        h = 1e-6
        checks = [(mu, dmu, (1, 2)), (cov, dcov, (2, 0, 1)),
                  (cam.rot, drot, (1,)), (cam.trans, dtrans, (0,))]
        for arr, gr, idx in checks:
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(mu, cov, cam.rot, cam.trans)
            arr[idx] = old - h
            lm = loss(mu, cov, cam.rot, cam.trans)
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - gr[idx]) / max(abs(fd), 1e-8) < 1e-6


class TestSum2d:
    def test_permutation_invariant_bitwise(self, rng):
        mu2d, cov2d, alpha, ch = random_screen_scene(rng)
        keys = np.arange(len(alpha))
        out1, _ = render_sum2d(mu2d, cov2d, alpha, ch, 16, 16, keys=keys)
        perm = rng.permutation(len(alpha))
        out2, _ = render_sum2d(mu2d[perm], cov2d[perm], alpha[perm], ch[perm],
                               16, 16, keys=keys[perm])
        assert np.array_equal(out1, out2)

    def test_single_gaussian_equals_composite(self, rng):
        mu2d, cov2d, alpha, ch = random_screen_scene(rng, n=1)
        s, _ = render_sum2d(mu2d, cov2d, alpha, ch, 16, 16)
        c, _ = composite(mu2d, cov2d, alpha, ch, np.array([0]), 16, 16)
        assert np.abs(s - c).max() < 1e-12

    def test_matches_naive_sum(self, rng):
        mu2d, cov2d, alpha, ch = random_screen_scene(rng)
        out, _ = render_sum2d(mu2d, cov2d, alpha, ch, 16, 16)
        ref = naive_sum2d(mu2d, cov2d, alpha, ch, 16, 16)
        assert np.abs(out - ref).max() <= 1e-6

    def test_backward_fd(self, rng):
        mu2d, cov2d, alpha, ch = random_screen_scene(rng)
        out, tape = render_sum2d(mu2d, cov2d, alpha, ch, 16, 16)
        g = rng.normal(size=out.shape)
        grads = render_sum2d_bwd(tape, ch, g)
        h = 1e-5
        i = 2
        old = mu2d[i, 0]
        mu2d[i, 0] = old + h
        lp = np.sum(render_sum2d(mu2d, cov2d, alpha, ch, 16, 16)[0] * g)
        mu2d[i, 0] = old - h
        lm = np.sum(render_sum2d(mu2d, cov2d, alpha, ch, 16, 16)[0] * g)
        mu2d[i, 0] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - grads["dmu2d"][i, 0]) / max(abs(fd), 1e-8) < 1e-6


class TestOrthoUvw:
    def test_single_gaussian_peak_at_center(self):
        mu = np.array([[0.5, 0.5, 0.0]])
        cov = np.array([np.eye(3) * 0.01])
        out, _ = render_ortho_uvw(mu, cov, np.array([0.9]), np.array([[1.0]]), 32)
        peak = np.unravel_index(np.argmax(out[..., 0]), (32, 32))
        assert peak == (15, 15) or peak == (16, 16) or peak == (15, 16) or peak == (16, 15)

    def test_outer_opaque_hides_inner(self):
        # u = v = 0.5 puts the splat exactly on the center of texel (15, 15)
        mu = np.array([[0.5, 0.5, 0.2], [0.5, 0.5, 0.0]])
        cov = np.tile(np.eye(3)[None] * 0.02, (2, 1, 1))
        ch = np.array([[1.0], [5.0]])
        out, _ = render_ortho_uvw(mu, cov, np.array([1.0, 1.0]), ch, 32)
        assert out[15, 15, 0] == pytest.approx(1.0)

    def test_w_only_orders(self):
        # moving the inner Gaussian further down must not change the image
        mu1 = np.array([[0.5, 0.5, 0.2], [0.5, 0.5, -0.1]])
        mu2 = np.array([[0.5, 0.5, 0.2], [0.5, 0.5, -0.9]])
        cov = np.tile(np.eye(3)[None] * 0.02, (2, 1, 1))
        ch = np.array([[1.0], [5.0]])
        a = np.array([0.7, 0.7])
        o1, _ = render_ortho_uvw(mu1, cov, a, ch, 32)
        o2, _ = render_ortho_uvw(mu2, cov, a, ch, 32)
        assert np.array_equal(o1, o2)


class TestTriangleIdRender:
    def _cam(self, size=32):
        f = size / (2 * np.tan(np.deg2rad(35) / 2))
        return Camera(f, f, size / 2, size / 2, size, size,
                      np.zeros(3), np.array([0.0, 0.0, 4.0]))

    def test_single_front_facing_triangle(self):
        v = np.array([[-20., -20, 1], [20, -20, 1], [0, 40, 1]])
        f = np.array([[0, 2, 1]])  # wound so the normal faces the camera (-z)
        m = Mesh(v, f, trivial_uvs(v, f), np.zeros(1, dtype=np.int64))
        cam = Camera(30.0, 30.0, 8.0, 8.0, 16, 16, np.zeros(3), np.zeros(3))
        ids, depth = triangle_id_render(m, cam)
        assert np.all(ids == 0)
        assert np.allclose(depth, 1.0, atol=0.1)

    def test_icosphere_visible_set_matches_ray_oracle(self, icosphere_mesh):
        cam = self._cam()
        ids, _ = triangle_id_render(icosphere_mesh, cam)
        origin, dirs = cam.pixel_rays()
        fn = face_normals(icosphere_mesh)
        ref = np.full(ids.shape, -1, dtype=np.int64)
        for r in range(ids.shape[0]):
            for c in range(ids.shape[1]):
                t, _ = brute_force_first_hit(icosphere_mesh, origin, dirs[r, c])
                if t >= 0 and fn[t] @ dirs[r, c] < 0:
                    ref[r, c] = t
        assert np.array_equal(ids, ref)

    def test_nearer_surface_wins(self):
        v = np.array([[-5., -5, 2], [5, -5, 2], [0, 5, 2],
                      [-5., -5, 1], [5, -5, 1], [0, 5, 1]])
        f = np.array([[0, 2, 1], [3, 5, 4]])
        m = Mesh(v, f, trivial_uvs(v, f), np.zeros(2, dtype=np.int64))
        cam = Camera(30.0, 30.0, 8.0, 8.0, 16, 16, np.zeros(3), np.zeros(3))
        ids, _ = triangle_id_render(m, cam)
        assert np.all(ids[ids >= 0] == 1)


def test_view_colors_bwd_fd(rng):
    n = 5
    coeffs = rng.normal(size=(n, 3, 16)) * 0.3
    mu = rng.normal(size=(n, 3)) + [0, 0, 3]
    center = rng.normal(size=3)
    cols, cache = view_colors(coeffs, mu, center, 3)
    dc = rng.normal(size=cols.shape)
    dsh, dmu, dcen = view_colors_bwd(cache, dc)
    h = 1e-6

    def loss(mu_, coeffs_, center_):
        c, _ = view_colors(coeffs_, mu_, center_, 3)
        return np.sum(c * dc)

    for arr, gr, idx in ((mu, dmu, (1, 2)), (coeffs, dsh, (0, 1, 5)),
                         (center, dcen, (0,))):
        old = arr[idx]
        arr[idx] = old + h
        lp = loss(mu, coeffs, center)
        arr[idx] = old - h
        lm = loss(mu, coeffs, center)
        arr[idx] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - gr[idx]) / max(abs(fd), 1e-8) < 1e-6


def test_gbuffer_normals_and_uv(icosphere_mesh):
    size = 24
    f = size / (2 * np.tan(np.deg2rad(35) / 2))
    cam = Camera(f, f, size / 2, size / 2, size, size, np.zeros(3),
                 np.array([0.0, 0.0, 4.0]))
    gb = make_gbuffer(icosphere_mesh, cam)
    assert gb.mask.any()
    pos = gb.position[gb.mask]
    assert np.abs(np.linalg.norm(pos, axis=1) - 1.0).max() < 0.02
    nrm = gb.normal[gb.mask]
    outward = pos / np.linalg.norm(pos, axis=1, keepdims=True)
    assert np.einsum("pk,pk->p", nrm, outward).min() > 0.98
