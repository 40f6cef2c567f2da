"""Core math: quaternion rotation, relative poses, Euler round-trips."""

import numpy as np
import pytest

from catchsim.geometry import (
    RigidPose,
    compose_pose,
    euler_to_quat,
    identity_pose,
    quat_from_axis_angle,
    quat_identity,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_euler,
    quat_to_matrix,
    quat_to_rotvec,
    quat_from_rotvec,
    relative_pose,
    transform_point,
)


def hom(pose: RigidPose) -> np.ndarray:
    """4x4 homogeneous matrix oracle used to cross-check pose algebra."""
    m = np.eye(4)
    m[:3, :3] = quat_to_matrix(pose.orientation)
    m[:3, 3] = pose.position
    return m


def pose_from_hom(m: np.ndarray) -> RigidPose:
    # rotation matrix -> quaternion via the w-major branch (test inputs are
    # kept away from the w ~ 0 region)
    r = m[:3, :3]
    w = 0.5 * np.sqrt(max(0.0, 1.0 + np.trace(r)))
    q = np.array([w,
                  (r[2, 1] - r[1, 2]) / (4 * w),
                  (r[0, 2] - r[2, 0]) / (4 * w),
                  (r[1, 0] - r[0, 1]) / (4 * w)])
    return RigidPose(m[:3, 3].copy(), quat_normalize(q))


class TestQuatRotate:
    def test_identity(self):
        v = np.array([1.0, 2.0, 3.0])
        assert np.allclose(quat_rotate(quat_identity(), v), v)

    def test_half_turn_about_z(self):
        q = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.pi)
        assert np.allclose(quat_rotate(q, np.array([1.0, 0.0, 0.0])),
                           [-1.0, 0.0, 0.0], atol=1e-12)

    def test_quarter_turn_about_z(self):
        q = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.pi / 2)
        assert np.allclose(quat_rotate(q, np.array([1.0, 0.0, 0.0])),
                           [0.0, 1.0, 0.0], atol=1e-12)

    def test_norm_preserved(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            q = quat_normalize(rng.normal(size=4))
            v = rng.normal(size=3)
            rv = quat_rotate(q, v)
            assert abs(np.linalg.norm(rv) - np.linalg.norm(v)) \
                <= 1e-12 * max(1.0, np.linalg.norm(v))

    def test_matches_matrix(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            q = quat_normalize(rng.normal(size=4))
            v = rng.normal(size=3)
            assert np.allclose(quat_rotate(q, v), quat_to_matrix(q) @ v,
                               atol=1e-12)


class TestRelativePose:
    def test_self_is_identity(self):
        rng = np.random.default_rng(2)
        p = RigidPose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
        rel = relative_pose(p, p)
        assert np.allclose(rel.position, 0, atol=1e-12)
        assert np.allclose(rel.orientation, quat_identity(), atol=1e-12)

    def test_identity_frame(self):
        target = RigidPose(np.array([1.0, 0.0, 0.0]), quat_identity())
        rel = relative_pose(target, identity_pose())
        assert np.allclose(rel.position, [1.0, 0.0, 0.0])

    def test_translated_rotated_frame_vs_matrix_oracle(self):
        frame = RigidPose(np.array([0.0, 0.0, 1.0]),
                          quat_from_axis_angle(np.array([0, 0, 1.0]), np.pi / 2))
        target = RigidPose(np.array([1.0, 0.0, 1.0]), quat_identity())
        rel = relative_pose(target, frame)
        expect = np.linalg.inv(hom(frame)) @ hom(target)
        oracle = pose_from_hom(expect)
        assert np.allclose(rel.position, oracle.position, atol=1e-12)
        assert np.allclose(rel.orientation, oracle.orientation, atol=1e-12)

    def test_random_vs_matrix_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            frame = RigidPose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
            target = RigidPose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
            rel = relative_pose(target, frame)
            oracle = np.linalg.inv(hom(frame)) @ hom(target)
            assert np.allclose(hom(rel), oracle, atol=1e-10)

    def test_compose_recovers_world_target(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            frame = RigidPose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
            target = RigidPose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
            back = compose_pose(frame, relative_pose(target, frame))
            assert np.allclose(back.position, target.position, atol=1e-12)
            assert min(np.linalg.norm(back.orientation - target.orientation),
                       np.linalg.norm(back.orientation + target.orientation)) < 1e-12


class TestEuler:
    def test_zero_is_identity(self):
        assert np.allclose(euler_to_quat(np.zeros(3)), quat_identity())

    def test_pi_roll(self):
        q = euler_to_quat(np.array([np.pi, 0.0, 0.0]))
        expect = quat_from_axis_angle(np.array([1.0, 0, 0]), np.pi)
        assert np.allclose(q, expect, atol=1e-12)

    def test_specific_round_trip(self):
        rpy = np.array([0.3, -0.2, 0.7])
        q = euler_to_quat(rpy)
        assert np.allclose(quat_to_euler(q), rpy, atol=1e-9)

    def test_random_round_trip(self):
        rng = np.random.default_rng(5)
        count = 0
        while count < 1000:
            rpy = rng.uniform([-np.pi, -np.pi / 2, -np.pi],
                              [np.pi, np.pi / 2, np.pi])
            if abs(abs(rpy[1]) - np.pi / 2) < 1e-3:  # skip near gimbal lock
                continue
            count += 1
            q = euler_to_quat(rpy)
            q2 = euler_to_quat(quat_to_euler(q))
            assert min(np.linalg.norm(q - q2), np.linalg.norm(q + q2)) < 1e-9

    def test_gimbal_lock_roll_is_zero(self):
        q = euler_to_quat(np.array([0.4, np.pi / 2, 0.1]))
        rpy = quat_to_euler(q)
        assert rpy[0] == 0.0
        assert abs(rpy[1] - np.pi / 2) < 1e-9
        # canonical solution still reproduces the rotation
        q2 = euler_to_quat(rpy)
        assert min(np.linalg.norm(q - q2), np.linalg.norm(q + q2)) < 1e-9

    def test_extrinsic_xyz_convention(self):
        # roll then pitch then yaw, all about world axes
        rpy = np.array([0.2, 0.5, -0.8])
        rx = quat_from_axis_angle(np.array([1.0, 0, 0]), rpy[0])
        ry = quat_from_axis_angle(np.array([0, 1.0, 0]), rpy[1])
        rz = quat_from_axis_angle(np.array([0, 0, 1.0]), rpy[2])
        expect = quat_multiply(rz, quat_multiply(ry, rx))
        assert np.allclose(euler_to_quat(rpy), quat_normalize(expect), atol=1e-12)


class TestRotvec:
    def test_round_trip(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            rv = rng.normal(size=3)
            rv = rv / np.linalg.norm(rv) * rng.uniform(0, np.pi - 1e-3)
            assert np.allclose(quat_to_rotvec(quat_from_rotvec(rv)), rv, atol=1e-10)

    def test_small_angle(self):
        rv = np.array([1e-10, 0, 0])
        assert np.allclose(quat_to_rotvec(quat_from_rotvec(rv)), rv, atol=1e-15)


def test_canonical_sign():
    q = quat_normalize(np.array([-1.0, 0.2, 0.1, -0.3]))
    assert q[0] >= 0


def test_transform_point_matches_matrix():
    rng = np.random.default_rng(7)
    pose = RigidPose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
    p = rng.normal(size=3)
    expect = (hom(pose) @ np.append(p, 1.0))[:3]
    assert np.allclose(transform_point(pose, p), expect, atol=1e-12)
