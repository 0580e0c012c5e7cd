import numpy as np
import pytest

from gsavatar.errors import ValidationError
from gsavatar.scene import Pose
from gsavatar.skinning import (
    forward_kinematics,
    lbs_backward,
    lbs_normals,
    lbs_points,
    rodrigues,
    so3_left_jacobian,
)

from reference_impls import central_difference, chain_template, fd_close


def random_unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestRodrigues:
    def test_identity_at_zero(self):
        assert np.allclose(rodrigues(np.zeros((1, 3)))[0], np.eye(3), atol=1e-15)

    def test_quarter_turn_about_z(self):
        r = rodrigues(np.array([[0.0, 0.0, np.pi / 2]]))[0]
        assert np.allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)
        assert np.allclose(r @ [0, 1, 0], [-1, 0, 0], atol=1e-12)

    def test_orthonormal_for_random_axes(self, rng):
        v = rng.normal(0, 2.0, (50, 3))
        r = rodrigues(v)
        eye = np.eye(3)
        for m in r:
            assert np.allclose(m.T @ m, eye, atol=1e-12)
            assert np.linalg.det(m) == pytest.approx(1.0)

    def test_tiny_angle_series_branch(self):
        v = np.array([[1e-10, -2e-10, 3e-10]])
        r = rodrigues(v)[0]
        assert np.allclose(r, np.eye(3) + np.array([
            [0, -3e-10, -2e-10],
            [3e-10, 0, -1e-10],
            [2e-10, 1e-10, 0],
        ]), atol=1e-18)

    def test_left_jacobian_linearizes_the_map(self, rng):
        theta = rng.normal(0, 1.0, 3)
        jac = so3_left_jacobian(theta[None])[0]
        r0 = rodrigues(theta[None])[0]
        eps = 1e-7
        for i in range(3):
            d = np.zeros(3)
            d[i] = eps
            fd = (rodrigues((theta + d)[None])[0] - rodrigues((theta - d)[None])[0]) / (2 * eps)
            gen = np.zeros((3, 3))
            axis = jac[:, i]
            gen[0, 1], gen[0, 2] = -axis[2], axis[1]
            gen[1, 0], gen[1, 2] = axis[2], -axis[0]
            gen[2, 0], gen[2, 1] = -axis[1], axis[0]
            assert np.allclose(fd, gen @ r0, atol=1e-6)


class TestForwardKinematics:
    def test_identity_pose_gives_identity_skins(self, rng):
        t = chain_template(rng)
        fk = forward_kinematics(t, Pose.identity(3))
        for g in fk.skin:
            assert np.allclose(g, np.eye(4), atol=1e-12)
        assert np.allclose(fk.joint_positions, t.rest_joints, atol=1e-6)

    def test_root_rotation_swings_the_chain(self, rng):
        t = chain_template(rng)
        pose = Pose.identity(3)
        pose.joint_rotations[0] = [0.0, 0.0, np.pi / 2]
        fk = forward_kinematics(t, pose)
        # joints at (0,1,0) and (0,2,0) rotate about the root to -x
        assert np.allclose(fk.joint_positions[1], [-1, 0, 0], atol=1e-12)
        assert np.allclose(fk.joint_positions[2], [-2, 0, 0], atol=1e-12)

    def test_elbow_rotation_composes(self, rng):
        t = chain_template(rng)
        pose = Pose.identity(3)
        pose.joint_rotations[0] = [0.0, 0.0, np.pi / 2]
        pose.joint_rotations[1] = [0.0, 0.0, np.pi / 2]
        fk = forward_kinematics(t, pose)
        # a point at rest (0, 2, 0), rigid with joint 1:
        # joint1 bends it to (-1, 1, 0), then the root takes it to (-1, -1, 0)
        w = np.array([[0.0, 1.0, 0.0]])
        posed = lbs_points(w, np.array([[0.0, 2.0, 0.0]]), fk)
        assert np.allclose(posed[0], [-1, -1, 0], atol=1e-12)

    def test_root_translation_shifts_everything(self, rng):
        t = chain_template(rng)
        pose = Pose.identity(3)
        pose.root_translation[:] = [0.3, -0.2, 0.7]
        fk = forward_kinematics(t, pose)
        posed = lbs_points(t.blend_weights, t.vertices, fk)
        assert np.allclose(posed, np.asarray(t.vertices, dtype=np.float64)
                           + [0.3, -0.2, 0.7], atol=1e-6)

    def test_joint_count_mismatch_raises(self, rng):
        t = chain_template(rng)
        with pytest.raises(ValidationError):
            forward_kinematics(t, Pose.identity(5))


class TestInvariants:
    def test_identity_pose_is_identity_map(self, rng):
        t = chain_template(rng, n_verts=60)
        fk = forward_kinematics(t, Pose.identity(3))
        posed = lbs_points(t.blend_weights, t.vertices, fk)
        assert np.max(np.abs(posed - t.vertices)) < 1e-6
        normals = random_unit_rows(rng, 60)
        out = lbs_normals(t.blend_weights, normals, fk)
        assert np.max(np.abs(out - normals)) < 1e-6

    def test_rigid_equivariance_under_root_motion(self, rng):
        # root-only rotation + translation must move every point rigidly
        # regardless of its blend weights
        t = chain_template(rng, n_verts=80)
        pose = Pose.identity(3)
        axis_angle = rng.normal(0, 0.8, 3)
        shift = rng.normal(0, 1.0, 3)
        pose.joint_rotations[0] = axis_angle
        pose.root_translation[:] = shift
        fk = forward_kinematics(t, pose)
        posed = lbs_points(t.blend_weights, t.vertices, fk)
        r = rodrigues(axis_angle[None])[0]
        pivot = np.asarray(t.rest_joints[0], dtype=np.float64)
        expect = (np.asarray(t.vertices, dtype=np.float64) - pivot) @ r.T + pivot + shift
        assert np.max(np.abs(posed - expect)) < 1e-6

        normals = random_unit_rows(rng, 80)
        out = lbs_normals(t.blend_weights, normals, fk)
        assert np.max(np.abs(out - normals @ r.T)) < 1e-6

    def test_posed_normals_stay_unit(self, rng):
        t = chain_template(rng, n_verts=100)
        pose = Pose(rng.normal(0, 0.7, (3, 3)), rng.normal(0, 0.5, 3))
        fk = forward_kinematics(t, pose)
        out = lbs_normals(t.blend_weights, random_unit_rows(rng, 100), fk)
        assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-6


class TestBackward:
    def test_fd_all_parameters(self, rng):
        t = chain_template(rng, n_verts=25)
        pose = Pose(rng.normal(0, 0.6, (3, 3)), rng.normal(0, 0.4, 3))
        points = np.asarray(t.vertices, dtype=np.float64).copy()
        normals = random_unit_rows(rng, 25)
        g_pts = rng.normal(size=(25, 3))
        g_nrm = rng.normal(size=(25, 3))

        def value():
            fk = forward_kinematics(t, pose)
            posed = lbs_points(t.blend_weights, points, fk)
            out_n = lbs_normals(t.blend_weights, normals, fk)
            return float(np.sum(posed * g_pts) + np.sum(out_n * g_nrm))

        fk = forward_kinematics(t, pose)
        grads = lbs_backward(t, t.blend_weights, points, pose, fk, g_pts,
                             normals=normals, d_posed_normals=g_nrm)
        eps = 1e-6
        for j in range(3):
            for c in range(3):
                fd = central_difference(value, pose.joint_rotations, (j, c), eps)
                assert fd_close(fd, grads.d_joint_rotations[j, c], rtol=1e-5, atol=1e-7), \
                    f"joint {j} comp {c}: fd={fd} analytic={grads.d_joint_rotations[j, c]}"
        for c in range(3):
            fd = central_difference(value, pose.root_translation, (c,), eps)
            assert fd_close(fd, grads.d_root_translation[c], rtol=1e-5, atol=1e-7)
        for k in (0, 7, 19):
            for c in range(3):
                fd = central_difference(value, points, (k, c), eps)
                assert fd_close(fd, grads.d_points[k, c], rtol=1e-5, atol=1e-7)
                fd = central_difference(value, normals, (k, c), eps)
                assert fd_close(fd, grads.d_normals[k, c], rtol=1e-5, atol=1e-7)

    def test_points_only_gradient_skips_normals(self, rng):
        t = chain_template(rng, n_verts=10)
        pose = Pose(rng.normal(0, 0.4, (3, 3)), np.zeros(3))
        fk = forward_kinematics(t, pose)
        grads = lbs_backward(t, t.blend_weights, t.vertices, pose, fk,
                             rng.normal(size=(10, 3)))
        assert grads.d_normals is None

    def test_normal_gradient_requires_normals(self, rng):
        t = chain_template(rng, n_verts=10)
        pose = Pose.identity(3)
        fk = forward_kinematics(t, pose)
        with pytest.raises(ValidationError):
            lbs_backward(t, t.blend_weights, t.vertices, pose, fk,
                         np.zeros((10, 3)), d_posed_normals=np.zeros((10, 3)))
