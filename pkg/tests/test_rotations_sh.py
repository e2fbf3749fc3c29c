import numpy as np
import pytest

from splatmesh import sh
from splatmesh.rotations import (axis_angle_to_rot, axis_angle_to_rot_bwd,
                                 quat_to_rot, quat_to_rot_bwd, rot_to_axis_angle,
                                 wrap_axis_angle)
from oracles import real_sh_reference


class TestRotations:
    def test_quat_rotation_valid(self, rng):
        q = rng.normal(size=(20, 4))
        R = quat_to_rot(q)
        assert np.abs(R @ np.swapaxes(R, 1, 2) - np.eye(3)).max() < 1e-12
        assert np.abs(np.linalg.det(R) - 1).max() < 1e-12

    def test_quat_bwd_fd(self, rng):
        q = rng.normal(size=4)
        dR = rng.normal(size=(3, 3))
        g = quat_to_rot_bwd(q, dR)
        h = 1e-6
        for i in range(4):
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            fd = np.sum((quat_to_rot(qp) - quat_to_rot(qm)) * dR) / (2 * h)
            assert abs(fd - g[i]) < 1e-8

    def test_axis_angle_bwd_fd(self, rng):
        for r in (rng.normal(size=3) * 0.8, np.zeros(3)):
            dR = rng.normal(size=(3, 3))
            g = axis_angle_to_rot_bwd(r, dR)
            h = 1e-6
            for i in range(3):
                rp, rm = r.copy(), r.copy()
                rp[i] += h
                rm[i] -= h
                fd = np.sum((axis_angle_to_rot(rp) - axis_angle_to_rot(rm)) * dR) / (2 * h)
                assert abs(fd - g[i]) < 1e-7

    def test_log_exp_round_trip(self, rng):
        for _ in range(20):
            r = rng.normal(size=3)
            r = r / np.linalg.norm(r) * rng.uniform(0.01, 3.1)
            R = axis_angle_to_rot(r)
            assert np.abs(axis_angle_to_rot(rot_to_axis_angle(R)) - R).max() < 1e-9

    def test_wrap_preserves_rotation(self):
        r = np.array([[0.0, 0.0, 3 * np.pi / 2], [0.1, 0.2, 0.3]])
        w = wrap_axis_angle(r)
        assert np.abs(axis_angle_to_rot(r) - axis_angle_to_rot(w)).max() < 1e-12
        assert np.linalg.norm(w, axis=-1).max() <= np.pi + 1e-12


class TestSphericalHarmonics:
    def test_against_legendre_reference(self, rng):
        dirs = rng.normal(size=(50, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        Y = sh.sh_basis(dirs, 3)
        k = 0
        for l in range(4):
            for m in range(-l, l + 1):
                ref = real_sh_reference(l, m, dirs)
                assert np.abs(Y[:, k] - ref).max() < 1e-10, (l, m)
                k += 1

    def test_dc_inversion_constant(self, rng):
        l = np.zeros((9, 3))
        l[0] = 1.0 / (sh.A_BAND[0] * sh.sh_basis(np.array([0., 0, 1]), 0)[0])
        n = rng.normal(size=(20, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        assert np.abs(sh.sh_eval(l, n) - 1.0).max() < 1e-12

    def test_band1_parity(self, rng):
        l = np.zeros((9, 3))
        l[1:4] = rng.normal(size=(3, 3))
        n = rng.normal(size=(10, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        assert np.abs(sh.sh_eval(l, n) + sh.sh_eval(l, -n)).max() < 1e-12

    def test_basis_grad_fd(self, rng):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        g = sh.sh_basis_grad(n, 3)
        h = 1e-6
        for i in range(3):
            np_, nm = n.copy(), n.copy()
            np_[i] += h
            nm[i] -= h
            fd = (sh.sh_basis(np_, 3) - sh.sh_basis(nm, 3)) / (2 * h)
            assert np.abs(fd - g[:, i]).max() < 1e-8

    def test_sh_eval_bwd_fd(self, rng):
        l = rng.normal(size=(9, 3))
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        dout = rng.normal(size=3)
        dl, dn = sh.sh_eval_bwd(l, n, dout)
        h = 1e-6
        for i in range(3):
            np_, nm = n.copy(), n.copy()
            np_[i] += h
            nm[i] -= h
            fd = np.dot(sh.sh_eval(l, np_) - sh.sh_eval(l, nm), dout) / (2 * h)
            assert abs(fd - dn[i]) < 1e-8
        for k in range(9):
            lp, lm = l.copy(), l.copy()
            lp[k, 1] += h
            lm[k, 1] -= h
            fd = np.dot(sh.sh_eval(lp, n) - sh.sh_eval(lm, n), dout) / (2 * h)
            assert abs(fd - dl[k, 1]) < 1e-8

    def test_band_constants(self):
        assert sh.A_BAND == pytest.approx([np.pi, 2 * np.pi / 3, np.pi / 4])
