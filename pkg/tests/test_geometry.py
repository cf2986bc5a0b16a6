"""Rigid-body math, camera model, and reprojection chain."""

import numpy as np
import pytest

from trislam.geometry import (CameraIntrinsics, Ray, SE3Pose, Twist,
                              apply_twist, backproject, compose, inverse,
                              pixel_ray_directions, project, reproject,
                              se3_exp, se3_log, so3_exp, so3_log)


def random_pose(rng, max_angle=2.5):
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0, max_angle)
    return SE3Pose(so3_exp(w), rng.normal(size=3))


class TestSE3Exp:
    def test_zero_twist_is_identity(self):
        p = se3_exp(Twist.zero())
        np.testing.assert_allclose(p.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(p.translation, 0.0, atol=1e-15)

    def test_pure_translation(self):
        p = se3_exp(Twist(rotational=np.zeros(3), translational=[0.1, 0, 0]))
        np.testing.assert_allclose(p.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(p.translation, [0.1, 0, 0], atol=1e-15)

    def test_quarter_turn_about_z(self):
        p = se3_exp(Twist(rotational=[0, 0, np.pi / 2], translational=np.zeros(3)))
        np.testing.assert_allclose(p.rotation @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_small_angle_branch_continuous(self):
        # just below and above the series switch agree closely
        for theta in (9e-9, 1.1e-8):
            R = so3_exp([theta, 0, 0])
            np.testing.assert_allclose(so3_log(R), [theta, 0, 0], atol=1e-15)

    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            w = rng.normal(size=3)
            w = w / np.linalg.norm(w) * rng.uniform(1e-6, np.pi - 1e-3)
            t = Twist(rotational=w, translational=rng.normal(size=3))
            back = se3_log(se3_exp(t))
            np.testing.assert_allclose(back.rotational, t.rotational, atol=1e-6)
            np.testing.assert_allclose(back.translational, t.translational, atol=1e-6)


class TestGroupOps:
    def test_compose_identity(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        q = compose(p, SE3Pose.identity())
        np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-15)
        np.testing.assert_allclose(q.translation, p.translation, atol=1e-15)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = random_pose(rng)
            q = compose(p, inverse(p))
            np.testing.assert_allclose(q.rotation, np.eye(3), atol=1e-9)
            np.testing.assert_allclose(q.translation, 0.0, atol=1e-9)

    def test_z_translations_add(self):
        a = SE3Pose(np.eye(3), [0, 0, 0.3])
        b = SE3Pose(np.eye(3), [0, 0, 0.5])
        np.testing.assert_allclose(compose(a, b).translation, [0, 0, 0.8])

    def test_apply_twist_stays_orthonormal(self):
        rng = np.random.default_rng(2)
        p = SE3Pose.identity()
        for _ in range(200):
            tw = Twist(rotational=0.05 * rng.normal(size=3),
                       translational=0.05 * rng.normal(size=3))
            p = apply_twist(tw, p)
        p.check_valid()


class TestValidation:
    def test_non_orthonormal_rejected(self):
        p = SE3Pose(np.eye(3) * 1.01, np.zeros(3))
        with pytest.raises(ValueError):
            p.check_valid()

    def test_reflection_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            SE3Pose(R, np.zeros(3)).check_valid()

    def test_ray_direction_must_be_unit(self):
        with pytest.raises(ValueError):
            Ray(origin=np.zeros(3), direction=[1.0, 1.0, 0.0])

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)


K100 = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=101, height=101)


class TestReproject:
    def test_identity_transform_is_identity(self):
        rng = np.random.default_rng(4)
        pose = random_pose(rng, max_angle=0.5)
        u = rng.uniform(0, 100, size=50)
        v = rng.uniform(0, 100, size=50)
        d = rng.uniform(0.5, 3.0, size=50)
        u2, v2, ok = reproject(u, v, d, K100, pose, pose)
        assert ok.all()
        np.testing.assert_allclose(u2, u, atol=1e-9)
        np.testing.assert_allclose(v2, v, atol=1e-9)

    def test_opposite_facing_reference_out_of_view(self):
        flip = SE3Pose(so3_exp([0, np.pi, 0]), np.zeros(3))
        _, _, ok = reproject(50.0, 50.0, 1.0, K100, SE3Pose.identity(), flip)
        assert not ok

    def test_lateral_translation_shift(self):
        # reference shifted +0.1 m in x sees the point 10 px to the left
        ref = SE3Pose(np.eye(3), [0.1, 0, 0])
        u2, v2, ok = reproject(50.0, 50.0, 1.0, K100, SE3Pose.identity(), ref)
        assert ok
        np.testing.assert_allclose([u2, v2], [40.0, 50.0], atol=1e-12)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError):
            reproject(50.0, 50.0, 0.0, K100, SE3Pose.identity(), SE3Pose.identity())


class TestProjection:
    def test_project_backproject_round_trip(self):
        rng = np.random.default_rng(5)
        pts = np.stack([rng.uniform(-0.4, 0.4, 30), rng.uniform(-0.4, 0.4, 30),
                        rng.uniform(0.5, 3.0, 30)], axis=-1)
        u, v, z = project(pts, K100)
        back = backproject(u, v, z, K100)
        np.testing.assert_allclose(back, pts, atol=1e-6)

    def test_pixel_ray_directions_unit_and_scale(self):
        rng = np.random.default_rng(6)
        pose = random_pose(rng, max_angle=1.0)
        us = rng.uniform(0, 100, 40)
        vs = rng.uniform(0, 100, 40)
        origins, dirs, z_scale = pixel_ray_directions(us, vs, K100, pose)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(origins,
                                   np.broadcast_to(pose.translation, (40, 3)))
        # walking z * z_scale along the unit ray reaches z-depth z
        z = rng.uniform(0.5, 2.0, 40)
        pts = origins + (z * z_scale)[:, None] * dirs
        cam = inverse(pose).apply(pts)
        np.testing.assert_allclose(cam[:, 2], z, atol=1e-9)
