import numpy as np
import pytest

from splatmesh.losses import (LossWeights, eyes_loss, image_loss,
                              laplacian_feature_loss, segmentation_loss, ssim,
                              visibility_dropout, _SSIM_C1, _SSIM_C2)
from splatmesh.mesh import EdgeAdjacency


class TestImageLoss:
    def test_identical_zero(self, rng):
        img = rng.uniform(size=(12, 12, 3))
        val, grad = image_loss(img, img)
        assert val == 0.0

    def test_constant_images_closed_form(self):
        one = np.ones((16, 16, 3))
        zero = np.zeros((16, 16, 3))
        val, _ = image_loss(one, zero)
        # SSIM(1, 0) = C1/(1+C1) * C2/C2 pointwise for constants
        s_const = _SSIM_C1 / (1.0 + _SSIM_C1)
        assert val == pytest.approx(0.8 * 1.0 + 0.2 * (1.0 - s_const), rel=1e-12)

    def test_gradient_fd(self, rng):
        x = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        t = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        _, g = image_loss(x, t)
        h = 1e-6
        for _ in range(25):
            i, j, c = rng.integers(8), rng.integers(8), rng.integers(3)
            xp = x.copy()
            xp[i, j, c] += h
            lp, _ = image_loss(xp, t)
            xp[i, j, c] -= 2 * h
            lm, _ = image_loss(xp, t)
            fd = (lp - lm) / (2 * h)
            assert abs(fd - g[i, j, c]) / max(abs(fd), 1e-6) < 1e-3

    def test_shape_mismatch_errors(self):
        with pytest.raises(ValueError):
            image_loss(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))

    def test_ssim_window_constants(self, rng):
        # reflect padding keeps constants constant: SSIM of equal constants = 1
        c = np.full((9, 9), 0.37)
        val, _ = ssim(c, c)
        assert val == pytest.approx(1.0)


class TestLaplacianLoss:
    def test_constant_field_zero(self):
        adj = EdgeAdjacency([[1, 2], [0, 2], [0, 1], [4], [3]])
        val, _ = laplacian_feature_loss(np.full((5, 3), 2.7), adj)
        assert val <= 1e-12

    def test_two_mutual_neighbors_hand_value(self):
        adj = EdgeAdjacency([[1], [0]])
        val, _ = laplacian_feature_loss(np.array([[0.0], [2.0]]), adj)
        assert val == pytest.approx(8.0)

    def test_linear_field_interior_zero(self):
        # regular 1D strip: interior elements see symmetric neighbors
        n = 9
        adj = EdgeAdjacency([[1]] + [[i - 1, i + 1] for i in range(1, n - 1)] + [[n - 2]])
        z = np.arange(n, dtype=float)[:, None] * 0.3
        val, _ = laplacian_feature_loss(z, adj)
        # only the two boundary elements contribute
        assert val == pytest.approx(2 * 0.3 ** 2)

    def test_translation_invariance(self, rng):
        adj = EdgeAdjacency([[1, 2], [0, 2], [0, 1], [4], [3]])
        z = rng.normal(size=(5, 3))
        v1, _ = laplacian_feature_loss(z, adj)
        v2, _ = laplacian_feature_loss(z + 11.33, adj)
        assert abs(v1 - v2) < 1e-10

    def test_isolated_contribute_zero(self, rng):
        adj = EdgeAdjacency([[], [], []])
        val, grad = laplacian_feature_loss(rng.normal(size=(3, 2)), adj)
        assert val == 0.0 and np.all(grad == 0.0)

    def test_gradient_fd(self, rng):
        adj = EdgeAdjacency([[1, 2], [0, 2], [0, 1], [4], [3]])
        z = rng.normal(size=(5, 3))
        _, g = laplacian_feature_loss(z, adj)
        h = 1e-6
        for i in range(5):
            for k in range(3):
                zp = z.copy()
                zp[i, k] += h
                lp, _ = laplacian_feature_loss(zp, adj)
                zp[i, k] -= 2 * h
                lm, _ = laplacian_feature_loss(zp, adj)
                assert abs((lp - lm) / (2 * h) - g[i, k]) < 1e-8


class TestSegmentationLoss:
    def test_perfect_onehot_zero(self):
        seg = np.zeros((2, 2, 3))
        seg[..., 1] = 1.0
        alpha = np.ones((2, 2))
        lab = np.ones((2, 2), dtype=np.int64)
        val, _, _ = segmentation_loss(seg, alpha, lab, np.zeros((2, 2), bool))
        assert val == 0.0

    def test_all_ignored_zero(self, rng):
        seg = rng.uniform(size=(3, 3, 2))
        val, dseg, dalpha = segmentation_loss(seg, np.ones((3, 3)),
                                              np.zeros((3, 3), dtype=np.int64),
                                              np.ones((3, 3), bool))
        assert val == 0.0 and np.all(dseg == 0)

    def test_two_label_hand_case(self):
        # one pixel: S_full = (0.5, 0.5) vs onehot(0): ||(-0.5, 0.5)||^2 = 0.5
        seg = np.zeros((2, 1, 2))
        alpha = np.zeros((2, 1))
        seg[0, 0, 1] = 0.5
        alpha[0, 0] = 0.5
        lab = np.zeros((2, 1), dtype=np.int64)
        val, _, _ = segmentation_loss(seg, alpha, lab, np.zeros((2, 1), bool))
        assert val == pytest.approx(0.5 / 2)

    def test_ignored_pixel_contents_irrelevant(self, rng):
        seg = rng.uniform(size=(4, 4, 3))
        alpha = rng.uniform(size=(4, 4))
        lab = rng.integers(0, 3, size=(4, 4))
        ign = np.zeros((4, 4), bool)
        ign[1, 2] = True
        v1, _, _ = segmentation_loss(seg, alpha, lab, ign)
        seg2 = seg.copy()
        seg2[1, 2] = 99.0
        v2, _, _ = segmentation_loss(seg2, alpha, lab, ign)
        assert v1 == v2

    def test_label_out_of_range_errors(self):
        with pytest.raises(ValueError):
            segmentation_loss(np.zeros((2, 2, 2)), np.zeros((2, 2)),
                              np.full((2, 2), 5), np.zeros((2, 2), bool))

    def test_gradient_fd(self, rng):
        seg = rng.uniform(0, 0.5, size=(4, 4, 3))
        alpha = seg.sum(-1)
        lab = rng.integers(0, 3, size=(4, 4))
        ign = rng.random((4, 4)) < 0.2
        _, dseg, dalpha = segmentation_loss(seg, alpha, lab, ign)
        h = 1e-6
        for _ in range(20):
            i, j, c = rng.integers(4), rng.integers(4), rng.integers(3)
            sp = seg.copy()
            sp[i, j, c] += h
            lp, _, _ = segmentation_loss(sp, alpha, lab, ign)
            sp[i, j, c] -= 2 * h
            lm, _, _ = segmentation_loss(sp, alpha, lab, ign)
            assert abs((lp - lm) / (2 * h) - dseg[i, j, c]) < 1e-8
            ap = alpha.copy()
            ap[i, j] += h
            lp, _, _ = segmentation_loss(seg, ap, lab, ign)
            ap[i, j] -= 2 * h
            lm, _, _ = segmentation_loss(seg, ap, lab, ign)
            assert abs((lp - lm) / (2 * h) - dalpha[i, j]) < 1e-8


class TestEyesLoss:
    def _shell(self, rng, n=12):
        p = rng.normal(size=(n, 3))
        return p / np.linalg.norm(p, axis=1, keepdims=True)

    def test_outside_is_zero(self, rng):
        eye = self._shell(rng)
        sock = eye[:5] * 1.5  # strictly outside along the outward normal
        val, ds, de = eyes_loss(sock, eye)
        assert val == 0.0 and np.all(ds == 0)

    def test_inside_hand_value(self):
        eye = np.array([[1., 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0],
                        [0, 0, 1], [0, 0, -1]])
        sock = np.array([[0.9, 0.0, 0.0]])
        val, _, _ = eyes_loss(sock, eye)
        assert val == pytest.approx(0.1)

    def test_scene_scaling_homogeneity(self, rng):
        eye = self._shell(rng)
        sock = eye[:6] * 0.8 + rng.normal(size=(6, 3)) * 0.05
        v1, _, _ = eyes_loss(sock, eye)
        v2, _, _ = eyes_loss(sock * 3.0, eye * 3.0)
        assert v2 == pytest.approx(3.0 * v1)

    def test_gradient_fd(self, rng):
        eye = self._shell(rng)
        sock = eye[:6] * 0.8 + rng.normal(size=(6, 3)) * 0.05
        val, ds, de = eyes_loss(sock, eye)
        assert val > 0
        h = 1e-6
        for arr, g in ((sock, ds), (eye, de)):
            for i in range(len(arr)):
                for k in range(3):
                    old = arr[i, k]
                    arr[i, k] = old + h
                    lp, _, _ = eyes_loss(sock, eye)
                    arr[i, k] = old - h
                    lm, _, _ = eyes_loss(sock, eye)
                    arr[i, k] = old
                    assert abs((lp - lm) / (2 * h) - g[i, k]) < 1e-7

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            eyes_loss(np.zeros((0, 3)), np.ones((3, 3)))


class TestVisibilityDropout:
    def test_p_one_only_visible(self):
        act = visibility_dropout(np.array([0, 1, 2]), np.arange(10), 1.0, seed=0)
        assert act.tolist() == [True] * 3 + [False] * 7

    def test_p_zero_all(self):
        act = visibility_dropout(np.array([0]), np.arange(10), 0.0, seed=0)
        assert act.all()

    def test_binomial_fraction(self):
        act = visibility_dropout(np.array([], dtype=np.int64), np.arange(10000),
                                 0.9, seed=1)
        assert abs(act.mean() - 0.10) < 0.01

    def test_deterministic_under_seed(self):
        a = visibility_dropout(np.array([1]), np.arange(100), 0.5, seed=7)
        b = visibility_dropout(np.array([1]), np.arange(100), 0.5, seed=7)
        assert np.array_equal(a, b)


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.dssim, w.scale, w.seg, w.eyes) == (0.2, 50.0, 50.0, 20.0)
    assert (w.center_camera, w.center_geometry) == (10.0, 20.0)
    assert (w.boundary_camera, w.boundary_geometry) == (50.0, 500.0)
    assert (w.lighting, w.rotation, w.blending, w.view) == (1e-3, 0.2, 0.1, 1e-3)
    with pytest.raises(ValueError):
        LossWeights(seg=-1.0)
    with pytest.raises(ValueError):
        LossWeights.from_json({"nope": 1.0})
