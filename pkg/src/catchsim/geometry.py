"""Vectors, unit quaternions and rigid transforms shared by every module.

Conventions:
  * 3-vectors are float64 numpy arrays of shape (3,).
  * Quaternions are float64 numpy arrays [w, x, y, z], unit norm, w >= 0.
  * Euler angles are extrinsic XYZ (roll about world x, then pitch about
    world y, then yaw about world z), i.e. R = Rz(yaw) @ Ry(pitch) @ Rx(roll).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_TOL = 1e-9


def vec3(x, y=None, z=None) -> np.ndarray:
    """Build a float64 3-vector from components or any length-3 sequence."""
    if y is None:
        a = np.asarray(x, dtype=np.float64)
        if a.shape != (3,):
            raise ValueError(f"expected 3 components, got shape {a.shape}")
        return a.copy()
    return np.array([x, y, z], dtype=np.float64)


def normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def quat(w, x, y, z) -> np.ndarray:
    return quat_normalize(np.array([w, x, y, z], dtype=np.float64))


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-norm quaternion with canonical sign (w >= 0)."""
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("cannot normalize quaternion with zero/non-finite norm")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by unit quaternion q."""
    w, x, y, z = q
    # v + 2*q_vec x (q_vec x v + w*v), expanded for speed
    tx = 2.0 * (y * v[2] - z * v[1])
    ty = 2.0 * (z * v[0] - x * v[2])
    tz = 2.0 * (x * v[1] - y * v[0])
    return np.array(
        [
            v[0] + w * tx + (y * tz - z * ty),
            v[1] + w * ty + (z * tx - x * tz),
            v[2] + w * tz + (x * ty - y * tx),
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = normalize(np.asarray(axis, dtype=np.float64))
    half = 0.5 * angle
    s = math.sin(half)
    return quat_normalize(
        np.array([math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])
    )


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    angle = float(np.linalg.norm(rv))
    if angle < 1e-12:
        # first-order expansion keeps the map smooth at zero
        return quat_normalize(np.array([1.0, 0.5 * rv[0], 0.5 * rv[1], 0.5 * rv[2]]))
    s = math.sin(0.5 * angle) / angle
    return quat_normalize(
        np.array([math.cos(0.5 * angle), rv[0] * s, rv[1] * s, rv[2] * s])
    )


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Log map: quaternion to rotation vector, angle in [0, pi]."""
    w, x, y, z = q
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    sin_half = math.sqrt(x * x + y * y + z * z)
    if sin_half < 1e-12:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * math.atan2(sin_half, w)
    return (angle / sin_half) * np.array([x, y, z])


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector a onto unit vector b."""
    a = normalize(np.asarray(a, dtype=np.float64))
    b = normalize(np.asarray(b, dtype=np.float64))
    c = float(np.dot(a, b))
    if c > 1.0 - 1e-12:
        return quat_identity()
    if c < -1.0 + 1e-12:
        # opposite vectors: rotate pi about any axis orthogonal to a
        axis = np.cross(a, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(axis) < 1e-9:
            axis = np.cross(a, np.array([0.0, 1.0, 0.0]))
        return quat_from_axis_angle(axis, math.pi)
    axis = np.cross(a, b)
    return quat_from_axis_angle(axis, math.atan2(float(np.linalg.norm(axis)), c))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_integrate(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Advance orientation by world-frame angular velocity over dt."""
    return quat_normalize(quat_multiply(quat_from_rotvec(omega * dt), q))


def euler_to_quat(rpy: np.ndarray) -> np.ndarray:
    """Extrinsic XYZ Euler angles (roll, pitch, yaw) to quaternion."""
    roll, pitch, yaw = rpy
    qx = quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), roll)
    qy = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), pitch)
    qz = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
    return quat_normalize(quat_multiply(qz, quat_multiply(qy, qx)))


def quat_to_euler(q: np.ndarray) -> np.ndarray:
    """Inverse of euler_to_quat. At gimbal lock (|pitch| = pi/2) returns roll=0."""
    m = quat_to_matrix(q)
    sp = -m[2, 0]
    sp = min(1.0, max(-1.0, sp))
    pitch = math.asin(sp)
    if abs(sp) > 1.0 - 1e-12:
        # degenerate: only yaw - sign(pitch)*roll is determined; pick roll = 0
        roll = 0.0
        yaw = math.atan2(-m[0, 1], m[1, 1])
    else:
        roll = math.atan2(m[2, 1], m[2, 2])
        yaw = math.atan2(m[1, 0], m[0, 0])
    return np.array([roll, pitch, yaw])


@dataclass
class RigidPose:
    """Position plus orientation of a rigid body in some frame."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=quat_identity)

    def copy(self) -> "RigidPose":
        return RigidPose(self.position.copy(), self.orientation.copy())

    def as_array(self) -> np.ndarray:
        """Pack as [px, py, pz, qw, qx, qy, qz]."""
        return np.concatenate([self.position, self.orientation])

    @staticmethod
    def from_array(a: np.ndarray) -> "RigidPose":
        return RigidPose(np.asarray(a[:3], dtype=np.float64).copy(),
                         quat_normalize(a[3:7]))


def identity_pose() -> RigidPose:
    return RigidPose()


def compose_pose(frame: RigidPose, local: RigidPose) -> RigidPose:
    """World pose of `local` expressed relative to `frame`."""
    return RigidPose(
        frame.position + quat_rotate(frame.orientation, local.position),
        quat_normalize(quat_multiply(frame.orientation, local.orientation)),
    )


def transform_point(frame: RigidPose, p_local: np.ndarray) -> np.ndarray:
    return frame.position + quat_rotate(frame.orientation, p_local)


def inverse_pose(pose: RigidPose) -> RigidPose:
    qi = quat_conjugate(pose.orientation)
    return RigidPose(-quat_rotate(qi, pose.position), quat_normalize(qi))


def relative_pose(world_target: RigidPose, world_frame: RigidPose) -> RigidPose:
    """Express world_target in world_frame's coordinates."""
    qi = quat_conjugate(world_frame.orientation)
    return RigidPose(
        quat_rotate(qi, world_target.position - world_frame.position),
        quat_normalize(quat_multiply(qi, world_target.orientation)),
    )
