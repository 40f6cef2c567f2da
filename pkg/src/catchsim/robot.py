"""Kinematic 7-DoF arm + 4-finger hand model.

Forward kinematics, geometric Jacobian, damped-least-squares velocity IK,
limit/singularity checks, key-point contact detection against primitive
shapes, and a penalty-force coupling between the hand and a flying object.
The arm is position/velocity controlled: contact forces act on the object
only.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .flight import ObjectShape, ObjectState, SimConfig, _damped_step
from .geometry import (
    RigidPose,
    normalize,
    quat_from_axis_angle,
    quat_identity,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
)


@dataclass
class FingerSpec:
    """Two-joint planar finger chain in the hand frame."""

    base: np.ndarray          # attachment point on the palm
    direction: np.ndarray     # pointing direction when fully open
    curl_axis: np.ndarray     # positive joint angle curls toward palm normal
    seg_lengths: tuple = (0.045, 0.040)
    q_lo: float = 0.0
    q_hi: float = 2.0
    max_speed: float = 8.0    # rad/s closing-rate limit
    thumb: bool = False


@dataclass
class HandModel:
    palm_points: np.ndarray   # (n_palm, 3) key-points on the inner palm face
    fingers: list
    palm_normal_local: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    hand_axis_local: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        if abs(float(np.dot(self.palm_normal_local, self.hand_axis_local))) > 1e-9:
            raise ValueError("palm normal must be orthogonal to the hand axis")
        if len(self.palm_points) < 4 or not self.fingers:
            raise ValueError("need >= 4 palm points and at least one finger")

    @property
    def n_fingers(self) -> int:
        return len(self.fingers)

    @property
    def n_finger_joints(self) -> int:
        return 2 * len(self.fingers)

    @property
    def n_keypoints(self) -> int:
        return len(self.palm_points) + 2 * len(self.fingers)

    def keypoint_roles(self) -> list:
        """Role tag per key-point index (palm layout first, then fingers)."""
        n = len(self.palm_points)
        xs = np.abs(self.palm_points[:, 0])
        edge = xs >= xs.max() - 1e-9
        roles = ["palm_edge" if e else "palm" for e in edge]
        for f in self.fingers:
            stem = "thumb" if f.thumb else "finger"
            roles += [f"{stem}_mid", f"{stem}_tip"]
        return roles

    def finger_q_lo(self) -> np.ndarray:
        return np.repeat([f.q_lo for f in self.fingers], 2).astype(float)

    def finger_q_hi(self) -> np.ndarray:
        return np.repeat([f.q_hi for f in self.fingers], 2).astype(float)

    def open_finger_q(self, fraction: float = 0.15) -> np.ndarray:
        """Reaching-policy open posture: `fraction` of the closing range."""
        lo, hi = self.finger_q_lo(), self.finger_q_hi()
        return lo + fraction * (hi - lo)

    def finger_keypoints_local(self, finger_q: np.ndarray) -> np.ndarray:
        """Hand-frame positions of the per-finger key-points (2 per finger).

        Fingers are planar two-joint chains: rotating the pointing direction
        about the curl axis by q0 and q0+q1 gives the two phalanx directions.
        """
        import math as _m

        pts = np.empty((2 * len(self.fingers), 3))
        for fi, f in enumerate(self.fingers):
            q0 = float(finger_q[2 * fi])
            q01 = q0 + float(finger_q[2 * fi + 1])
            ax, ay, az = f.curl_axis
            dx, dy, dz = f.direction
            for row, (ang, ln, base) in enumerate((
                    (q0, f.seg_lengths[0], f.base),
                    (q01, f.seg_lengths[1], None))):
                half = 0.5 * ang
                s = _m.sin(half)
                w = _m.cos(half)
                rx, ry, rz = _qrot(w, ax * s, ay * s, az * s, dx, dy, dz)
                i = 2 * fi + row
                if row == 0:
                    pts[i, 0] = f.base[0] + ln * rx
                    pts[i, 1] = f.base[1] + ln * ry
                    pts[i, 2] = f.base[2] + ln * rz
                else:
                    pts[i, 0] = pts[i - 1, 0] + ln * rx
                    pts[i, 1] = pts[i - 1, 1] + ln * ry
                    pts[i, 2] = pts[i - 1, 2] + ln * rz
        return pts


@dataclass
class ArmModel:
    """Serial revolute chain; offsets are parent-frame translations."""

    offsets: np.ndarray       # (dof, 3)
    axes: np.ndarray          # (dof, 3) unit rotation axes in the joint frame
    pos_lo: np.ndarray
    pos_hi: np.ndarray
    vel_limit: np.ndarray
    accel_limit: float = 500.0    # commanded-acceleration bound (torque proxy)
    palm_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.10]))
    hand: HandModel | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.axes = np.asarray(self.axes, dtype=float)
        if self.dof < 6:
            raise ValueError("arm needs at least 6 joints")
        if np.any(self.pos_lo >= self.pos_hi):
            raise ValueError("joint limits need lo < hi")

    @property
    def dof(self) -> int:
        return self.offsets.shape[0]


@dataclass
class HandArmState:
    arm_q: np.ndarray
    arm_dq: np.ndarray
    finger_q: np.ndarray
    finger_targets: np.ndarray
    hand_pose: RigidPose
    hand_lin_vel: np.ndarray
    hand_ang_vel: np.ndarray
    t: float = 0.0

    def copy(self) -> "HandArmState":
        return HandArmState(self.arm_q.copy(), self.arm_dq.copy(),
                            self.finger_q.copy(), self.finger_targets.copy(),
                            self.hand_pose.copy(), self.hand_lin_vel.copy(),
                            self.hand_ang_vel.copy(), self.t)


@dataclass
class ContactReport:
    n_c: int
    indices: np.ndarray
    depths: np.ndarray
    normals: np.ndarray      # outward object-surface normals at the key-points
    points: np.ndarray       # key-point world positions in contact

    @staticmethod
    def empty() -> "ContactReport":
        return ContactReport(0, np.zeros(0, dtype=int), np.zeros(0),
                             np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass
class ContactParams:
    stiffness: float = 5000.0   # N/m
    damping: float = 50.0       # N s/m, also the viscous friction coefficient
    friction: float = 0.8
    eps: float = 0.005          # contact shell around the primitive surface


# well-conditioned start configuration used by trials and training episodes:
# palm at ~(0.55, -0.35, 0.90) facing +x (toward the incoming toss)
DEFAULT_HOME_Q = np.array([-0.85, 1.47, -0.06, -1.60, 0.85, 1.61, 0.14])


def default_robot() -> ArmModel:
    """7-DoF arm (z/y alternating axes) with a 4-finger, 16-key-point hand."""
    offsets = np.array([
        [0.0, 0.0, 0.20],
        [0.0, 0.0, 0.15],
        [0.0, 0.0, 0.28],
        [0.0, 0.0, 0.28],
        [0.0, 0.0, 0.25],
        [0.0, 0.0, 0.25],
        [0.0, 0.0, 0.10],
    ])
    axes = np.array([
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ])
    pos_lo = np.array([-2.9, -2.1, -2.9, -2.1, -2.9, -2.1, -2.9])
    pos_hi = -pos_lo
    vel_limit = np.full(7, 4.0)
    palm_xs = (-0.030, -0.010, 0.010, 0.030)
    palm_points = np.array([[x, y, 0.004] for x in palm_xs for y in (-0.020, 0.020)])
    fingers = [
        FingerSpec(np.array([-0.035, 0.050, 0.0]), np.array([0.0, 1.0, 0.0]),
                   np.array([1.0, 0.0, 0.0])),
        FingerSpec(np.array([0.0, 0.050, 0.0]), np.array([0.0, 1.0, 0.0]),
                   np.array([1.0, 0.0, 0.0])),
        FingerSpec(np.array([0.035, 0.050, 0.0]), np.array([0.0, 1.0, 0.0]),
                   np.array([1.0, 0.0, 0.0])),
        FingerSpec(np.array([0.0, -0.050, 0.0]), np.array([0.0, -1.0, 0.0]),
                   np.array([-1.0, 0.0, 0.0]), thumb=True),
    ]
    hand = HandModel(palm_points, fingers)
    return ArmModel(offsets, axes, pos_lo, pos_hi, vel_limit, 500.0,
                    np.array([0.0, 0.0, 0.10]), hand)


def _qmul(aw, ax, ay, az, bw, bx, by, bz):
    return (aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw)


def _qrot(w, x, y, z, vx, vy, vz):
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return (vx + w * tx + (y * tz - z * ty),
            vy + w * ty + (z * tx - x * tz),
            vz + w * tz + (x * ty - y * tx))


def fk_chain(model: ArmModel, arm_q: np.ndarray):
    """Palm pose plus world joint origins/axes (for the Jacobian).

    Fully inlined scalar quaternion arithmetic: this runs in every physics
    substep of every trial and training episode.
    """
    cache = getattr(model, "_fk_cache", None)
    if cache is None:
        cache = (model.offsets.tolist(), model.axes.tolist(),
                 model.palm_offset.tolist())
        model._fk_cache = cache
    offs, axes, palm = cache
    px = py = pz = 0.0
    w, x, y, z = 1.0, 0.0, 0.0, 0.0
    dof = len(offs)
    origins = np.empty((dof, 3))
    axes_w = np.empty((dof, 3))
    for i in range(dof):
        ox, oy, oz = offs[i]
        kx, ky, kz = axes[i]
        # rotate the offset and the joint axis into the world frame
        tx = 2.0 * (y * oz - z * oy)
        ty = 2.0 * (z * ox - x * oz)
        tz = 2.0 * (x * oy - y * ox)
        px += ox + w * tx + (y * tz - z * ty)
        py += oy + w * ty + (z * tx - x * tz)
        pz += oz + w * tz + (x * ty - y * tx)
        origins[i, 0] = px
        origins[i, 1] = py
        origins[i, 2] = pz
        tx = 2.0 * (y * kz - z * ky)
        ty = 2.0 * (z * kx - x * kz)
        tz = 2.0 * (x * ky - y * kx)
        axes_w[i, 0] = kx + w * tx + (y * tz - z * ty)
        axes_w[i, 1] = ky + w * ty + (z * tx - x * tz)
        axes_w[i, 2] = kz + w * tz + (x * ty - y * tx)
        half = 0.5 * float(arm_q[i])
        s = math.sin(half)
        bw = math.cos(half)
        bx, by, bz = kx * s, ky * s, kz * s
        w, x, y, z = (w * bw - x * bx - y * by - z * bz,
                      w * bx + x * bw + y * bz - z * by,
                      w * by - x * bz + y * bw + z * bx,
                      w * bz + x * by - y * bx + z * bw)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    ox, oy, oz = palm
    tx = 2.0 * (y * oz - z * oy)
    ty = 2.0 * (z * ox - x * oz)
    tz = 2.0 * (x * oy - y * ox)
    pose = RigidPose(np.array([px + ox + w * tx + (y * tz - z * ty),
                               py + oy + w * ty + (z * tx - x * tz),
                               pz + oz + w * tz + (x * ty - y * tx)]),
                     np.array([w, x, y, z]))
    return pose, origins, axes_w


def forward_kinematics(model: ArmModel, arm_q: np.ndarray,
                       check_limits: bool = True) -> RigidPose:
    """Palm (end-effector) pose for a joint configuration."""
    arm_q = np.asarray(arm_q, dtype=float)
    if check_limits and (np.any(arm_q < model.pos_lo - 1e-12)
                         or np.any(arm_q > model.pos_hi + 1e-12)):
        raise ValueError("arm_q outside joint limits")
    pose, _, _ = fk_chain(model, arm_q)
    return pose


def hand_vectors(model: ArmModel, hand_pose: RigidPose):
    """World-frame palm normal u_n and hand axis u_x."""
    u_n = quat_rotate(hand_pose.orientation, model.hand.palm_normal_local)
    u_x = quat_rotate(hand_pose.orientation, model.hand.hand_axis_local)
    return u_n, u_x


def keypoints_world(model: ArmModel, hand_pose: RigidPose,
                    finger_q: np.ndarray) -> np.ndarray:
    """(k, 3) world positions of all hand key-points."""
    local = np.vstack([model.hand.palm_points,
                       model.hand.finger_keypoints_local(finger_q)])
    r = quat_to_matrix(hand_pose.orientation)
    return hand_pose.position + local @ r.T


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product without np.cross's axis plumbing."""
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _jac_from_chain(pose: RigidPose, origins: np.ndarray,
                    axes_w: np.ndarray) -> np.ndarray:
    J = np.empty((6, len(origins)))
    J[:3] = _cross_rows(axes_w, pose.position - origins).T
    J[3:] = axes_w.T
    return J


def jacobian(model: ArmModel, arm_q: np.ndarray) -> np.ndarray:
    """6 x dof geometric Jacobian at the palm (linear rows first)."""
    pose, origins, axes_w = fk_chain(model, arm_q)
    return _jac_from_chain(pose, origins, axes_w)


def ik_velocity(model: ArmModel, arm_q: np.ndarray, twist: np.ndarray,
                lam: float = 0.01, J: np.ndarray | None = None):
    """Damped-least-squares joint velocities for a desired palm twist.

    Returns (dq, residual_twist) after clamping to velocity limits. Pass a
    precomputed Jacobian to avoid recomputing the chain.
    """
    if J is None:
        J = jacobian(model, arm_q)
    A = J @ J.T + (lam * lam) * np.eye(6)
    dq = J.T @ np.linalg.solve(A, np.asarray(twist, dtype=float))
    dq = np.clip(dq, -model.vel_limit, model.vel_limit)
    residual = np.asarray(twist, dtype=float) - J @ dq
    return dq, residual


TERMINATION_OK = "ok"
TERMINATION_SINGULARITY = "singularity"
TERMINATION_POSITION = "position_limit"
TERMINATION_VELOCITY = "velocity_limit"
TERMINATION_TORQUE = "torque_limit"


def check_termination(model: ArmModel, arm_q: np.ndarray,
                      arm_dq: np.ndarray | None = None,
                      cmd_accel: np.ndarray | None = None,
                      sigma_min: float = 0.02,
                      J: np.ndarray | None = None) -> str:
    """Early-termination classification for safe-motion training."""
    if J is None:
        J = jacobian(model, arm_q)
    # smallest singular value of J via the 6x6 Gram matrix
    ev_min = float(np.linalg.eigvalsh(J @ J.T)[0])
    if ev_min < sigma_min * sigma_min:
        return TERMINATION_SINGULARITY
    margin = 0.01 * (model.pos_hi - model.pos_lo)
    if np.any(arm_q <= model.pos_lo + margin) or np.any(arm_q >= model.pos_hi - margin):
        return TERMINATION_POSITION
    if arm_dq is not None and np.any(np.abs(arm_dq) > model.vel_limit + 1e-9):
        return TERMINATION_VELOCITY
    if cmd_accel is not None and np.any(np.abs(cmd_accel) > model.accel_limit):
        return TERMINATION_TORQUE
    return TERMINATION_OK


# ---------------------------------------------------------------------------
# Point-to-primitive signed distances and contacts

def signed_distance(point: np.ndarray, shape: ObjectShape,
                    pose: RigidPose):
    """Signed distance from a point to the primitive surface, with the
    outward surface normal at the closest point. Cylinders use the capsule
    approximation."""
    sd, normals = signed_distance_batch(np.asarray(point, dtype=float)[None, :],
                                        shape, pose)
    return float(sd[0]), normals[0]


def signed_distance_batch(points: np.ndarray, shape: ObjectShape,
                          pose: RigidPose):
    """Vectorized signed distances and outward normals for (k, 3) points."""
    d = points - pose.position
    if shape.kind == "sphere":
        r = shape.dimensions[0]
        n = np.linalg.norm(d, axis=1)
        safe = np.maximum(n, 1e-12)
        normals = d / safe[:, None]
        normals[n < 1e-12] = np.array([0.0, 0.0, 1.0])
        return n - r, normals
    if shape.kind == "cylinder":
        r, length = shape.dimensions
        axis = quat_rotate(pose.orientation, shape.major_axis)
        h = 0.5 * length
        proj = np.clip(d @ axis, -h, h)
        e = d - proj[:, None] * axis
        n = np.linalg.norm(e, axis=1)
        safe = np.maximum(n, 1e-12)
        normals = e / safe[:, None]
        if np.any(n < 1e-12):
            perp = np.cross(axis, np.array([1.0, 0.0, 0.0]))
            if np.linalg.norm(perp) < 1e-9:
                perp = np.cross(axis, np.array([0.0, 1.0, 0.0]))
            normals[n < 1e-12] = perp / np.linalg.norm(perp)
        return n - r, normals
    rm = quat_to_matrix(pose.orientation)
    pl = d @ rm
    half = np.asarray(shape.dimensions, dtype=float)
    qv = np.abs(pl) - half
    inside = np.all(qv <= 0.0, axis=1)
    outside = np.maximum(qv, 0.0)
    dist = np.linalg.norm(outside, axis=1)
    sd = np.where(inside, np.max(qv, axis=1), dist)
    normals_l = np.zeros_like(pl)
    out_mask = ~inside
    if np.any(out_mask):
        normals_l[out_mask] = (np.sign(pl[out_mask]) * outside[out_mask]
                               / np.maximum(dist[out_mask], 1e-12)[:, None])
    if np.any(inside):
        ii = np.where(inside)[0]
        amax = np.argmax(qv[ii], axis=1)
        normals_l[ii, amax] = np.where(pl[ii, amax] >= 0, 1.0, -1.0)
    return sd, normals_l @ rm.T


def detect_contacts(model: ArmModel, hand_pose: RigidPose, finger_q: np.ndarray,
                    shape: ObjectShape, obj_pose: RigidPose,
                    eps: float = 0.005) -> ContactReport:
    """Key-points within `eps` of the primitive surface count as contacts."""
    pts = keypoints_world(model, hand_pose, finger_q)
    sd, normals = signed_distance_batch(pts, shape, obj_pose)
    mask = sd <= eps
    if not np.any(mask):
        return ContactReport.empty()
    idx = np.where(mask)[0]
    return ContactReport(len(idx), idx, eps - sd[idx], normals[idx], pts[idx])


def _contact_wrench(report: ContactReport, obj_state: ObjectState,
                    kp_velocities: np.ndarray, params: ContactParams):
    """Total contact force and torque on the object from penalty springs."""
    c = obj_state.pose.position
    r = report.points - c
    v_obj_pt = obj_state.lin_vel + _cross_rows(
        np.broadcast_to(obj_state.ang_vel, r.shape), r)
    v_rel = v_obj_pt - kp_velocities
    approach = np.sum(v_rel * report.normals, axis=1)
    fn = params.stiffness * report.depths + params.damping * approach
    active = fn > 0.0
    if not np.any(active):
        return np.zeros(3), np.zeros(3)
    fn = np.where(active, fn, 0.0)
    f = -fn[:, None] * report.normals
    v_t = v_rel - approach[:, None] * report.normals
    vt_norm = np.linalg.norm(v_t, axis=1)
    slip = active & (vt_norm > 1e-9)
    if np.any(slip):
        ft = np.minimum(params.friction * fn[slip],
                        params.damping * vt_norm[slip])
        f[slip] -= (ft / vt_norm[slip])[:, None] * v_t[slip]
    force = f.sum(axis=0)
    torque = _cross_rows(r, f).sum(axis=0)
    return force, torque


def _finger_limits(hand: HandModel):
    if not hasattr(hand, "_limit_cache"):
        hand._limit_cache = (hand.finger_q_lo(), hand.finger_q_hi(),
                             np.repeat([f.max_speed for f in hand.fingers], 2))
    return hand._limit_cache


def _advance_hand(model: ArmModel, hand_arm: HandArmState, dt: float) -> HandArmState:
    """Kinematic arm/finger integration over dt (velocities held constant)."""
    out = hand_arm.copy()
    q_new = np.clip(hand_arm.arm_q + hand_arm.arm_dq * dt,
                    model.pos_lo, model.pos_hi)
    eff_dq = (q_new - hand_arm.arm_q) / dt
    out.arm_q = q_new
    f_lo, f_hi, f_speed = _finger_limits(model.hand)
    dq_f = np.clip(hand_arm.finger_targets - hand_arm.finger_q,
                   -f_speed * dt, f_speed * dt)
    out.finger_q = np.clip(hand_arm.finger_q + dq_f, f_lo, f_hi)
    pose, origins, axes_w = fk_chain(model, out.arm_q)
    twist = _jac_from_chain(pose, origins, axes_w) @ eff_dq
    out.hand_pose = pose
    out.hand_lin_vel = twist[:3]
    out.hand_ang_vel = twist[3:]
    out.t = hand_arm.t + dt
    return out


N_CONTACT_SUBSTEPS = 10  # keeps explicit penalty damping stable at dt=2 ms


def coupled_step(model: ArmModel, hand_arm: HandArmState, obj_state: ObjectState,
                 shape: ObjectShape, cfg: SimConfig, dt: float,
                 contact: ContactParams | None = None):
    """Advance hand and object together over dt with penalty contacts.

    Returns (hand_arm', obj_state', ContactReport). With no key-point near the
    object the object update is bit-identical to the free-flight integrator.
    """
    if contact is None:
        contact = ContactParams()
    new_hand = _advance_hand(model, hand_arm, dt)
    pts = keypoints_world(model, new_hand.hand_pose, new_hand.finger_q)
    # proximity check decides whether the stiff contact path is needed
    sd_all, _ = signed_distance_batch(pts, shape, obj_state.pose)
    speed = float(np.linalg.norm(obj_state.lin_vel - new_hand.hand_lin_vel))
    near = float(sd_all.min()) <= contact.eps + speed * dt + 0.005
    if not near:
        p, v, q, w = _damped_step(obj_state.pose.position, obj_state.lin_vel,
                                  obj_state.pose.orientation, obj_state.ang_vel,
                                  cfg.gravity, cfg.beta_lin, cfg.beta_ang, dt)
        new_obj = ObjectState(RigidPose(p, q), v, w,
                              cfg.gravity - cfg.beta_lin * v,
                              -cfg.beta_ang * w, obj_state.t + dt)
        return new_hand, new_obj, ContactReport.empty()

    kp_vel = (new_hand.hand_lin_vel
              + _cross_rows(np.broadcast_to(new_hand.hand_ang_vel, pts.shape),
                            pts - new_hand.hand_pose.position))
    inertia_body = shape.body_inertia()
    rm = quat_to_matrix(obj_state.pose.orientation)
    inv_inertia = rm @ np.diag(1.0 / inertia_body) @ rm.T
    sub_dt = dt / N_CONTACT_SUBSTEPS
    state = obj_state
    last_report = ContactReport.empty()
    for _ in range(N_CONTACT_SUBSTEPS):
        # the hand's key-points are frozen within the step; only the object
        # moves between sub-substeps
        sd, normals = signed_distance_batch(pts, shape, state.pose)
        mask = sd <= contact.eps
        if np.any(mask):
            idx = np.where(mask)[0]
            report = ContactReport(len(idx), idx, contact.eps - sd[idx],
                                   normals[idx], pts[idx])
            force, torque = _contact_wrench(report, state, kp_vel[idx], contact)
            extra_acc = force / shape.mass
            extra_angacc = inv_inertia @ torque
        else:
            report = ContactReport.empty()
            extra_acc = None
            extra_angacc = None
        p, v, q, w = _damped_step(state.pose.position, state.lin_vel,
                                  state.pose.orientation, state.ang_vel,
                                  cfg.gravity, cfg.beta_lin, cfg.beta_ang,
                                  sub_dt, extra_acc, extra_angacc)
        acc = cfg.gravity - cfg.beta_lin * v
        if extra_acc is not None:
            acc = acc + extra_acc
        state = ObjectState(RigidPose(p, q), v, w, acc, -cfg.beta_ang * w,
                            state.t + sub_dt)
        last_report = report
    # pin the timestamp to avoid sub-step rounding drift
    state.t = obj_state.t + dt
    return new_hand, state, last_report


@dataclass
class GraspWindowSample:
    """Per-step record consumed by the grasp-secured predicate."""

    t: float
    n_c: int
    has_thumb: bool
    has_finger: bool
    rel_speed: float
    obj_z: float


def grasp_secured(history, window: float = 0.2) -> bool:
    """True iff the grasp held for the whole trailing window: >= 3 contacts
    with thumb-side and finger-side participation, relative hand-object speed
    below 0.1 m/s, and the object above the ground plane."""
    if window < 0.2:
        raise ValueError("grasp-secured window must be >= 0.2 s")
    if not history:
        return False
    t_end = history[-1].t
    span = [s for s in history if s.t >= t_end - window]
    if not span or t_end - history[0].t < window - 1e-9:
        return False
    for s in span:
        if s.n_c < 3 or not (s.has_thumb and s.has_finger):
            return False
        if s.rel_speed >= 0.1 or s.obj_z <= 0.0:
            return False
    return True


def make_hand_arm_state(model: ArmModel, arm_q: np.ndarray,
                        finger_q: np.ndarray | None = None,
                        t: float = 0.0) -> HandArmState:
    """HandArmState with pose/velocity fields consistent with FK."""
    arm_q = np.asarray(arm_q, dtype=float).copy()
    if finger_q is None:
        finger_q = model.hand.open_finger_q()
    pose = forward_kinematics(model, arm_q, check_limits=False)
    return HandArmState(arm_q, np.zeros(model.dof), np.asarray(finger_q, float).copy(),
                        np.asarray(finger_q, float).copy(), pose,
                        np.zeros(3), np.zeros(3), t)


def kinematic_arm_step(model: ArmModel, hand_arm: HandArmState,
                       dq: np.ndarray, dt: float) -> HandArmState:
    """Integrate commanded joint velocities over dt (no object coupling);
    refreshes the derived hand pose and twist."""
    new_q = np.clip(hand_arm.arm_q + dq * dt, model.pos_lo, model.pos_hi)
    eff_dq = (new_q - hand_arm.arm_q) / dt
    hand_arm.arm_q = new_q
    hand_arm.arm_dq = eff_dq
    pose, origins, axes_w = fk_chain(model, new_q)
    twist = _jac_from_chain(pose, origins, axes_w) @ eff_dq
    hand_arm.hand_pose = pose
    hand_arm.hand_lin_vel = twist[:3]
    hand_arm.hand_ang_vel = twist[3:]
    hand_arm.t += dt
    return hand_arm


class IkError(Exception):
    pass


def ik_solve_pose(model: ArmModel, target: RigidPose,
                  q0: np.ndarray | None = None, max_iters: int = 300,
                  pos_tol: float = 1e-3, ori_tol: float = 1e-2,
                  lam: float = 0.05, step: float = 0.6) -> np.ndarray:
    """Iterative damped-least-squares position IK; raises IkError on failure."""
    from .geometry import quat_conjugate, quat_to_rotvec  # local to avoid cycle

    q = np.zeros(model.dof) if q0 is None else np.asarray(q0, dtype=float).copy()
    for _ in range(max_iters):
        pose = forward_kinematics(model, q, check_limits=False)
        pos_err = target.position - pose.position
        q_err = quat_multiply(target.orientation, quat_conjugate(pose.orientation))
        rot_err = quat_to_rotvec(quat_normalize(q_err))
        if np.linalg.norm(pos_err) < pos_tol and np.linalg.norm(rot_err) < ori_tol:
            return np.clip(q, model.pos_lo, model.pos_hi)
        twist = np.concatenate([pos_err, rot_err])
        J = jacobian(model, q)
        dq = J.T @ np.linalg.solve(J @ J.T + (lam * lam) * np.eye(6), twist)
        q = np.clip(q + step * dq, model.pos_lo, model.pos_hi)
    raise IkError(f"IK failed to converge to {target.position}")


# ---------------------------------------------------------------------------
# Structured-text robot description

def _fmt_rows(a: np.ndarray) -> str:
    return "; ".join(" ".join(f"{x:.9g}" for x in row) for row in np.atleast_2d(a))


def _parse_rows(s: str) -> np.ndarray:
    return np.array([[float(x) for x in row.split()] for row in s.split(";")])


def save_robot_config(model: ArmModel, out) -> None:
    cp = configparser.ConfigParser()
    cp["arm"] = {
        "offsets": _fmt_rows(model.offsets),
        "axes": _fmt_rows(model.axes),
        "pos_lo": " ".join(f"{x:.9g}" for x in model.pos_lo),
        "pos_hi": " ".join(f"{x:.9g}" for x in model.pos_hi),
        "vel_limit": " ".join(f"{x:.9g}" for x in model.vel_limit),
        "accel_limit": f"{model.accel_limit:.9g}",
        "palm_offset": " ".join(f"{x:.9g}" for x in model.palm_offset),
    }
    hand = model.hand
    cp["hand"] = {
        "palm_points": _fmt_rows(hand.palm_points),
        "palm_normal": " ".join(f"{x:.9g}" for x in hand.palm_normal_local),
        "hand_axis": " ".join(f"{x:.9g}" for x in hand.hand_axis_local),
    }
    for i, f in enumerate(hand.fingers):
        cp[f"finger{i}"] = {
            "base": " ".join(f"{x:.9g}" for x in f.base),
            "direction": " ".join(f"{x:.9g}" for x in f.direction),
            "curl_axis": " ".join(f"{x:.9g}" for x in f.curl_axis),
            "seg_lengths": " ".join(f"{x:.9g}" for x in f.seg_lengths),
            "q_lo": f"{f.q_lo:.9g}",
            "q_hi": f"{f.q_hi:.9g}",
            "max_speed": f"{f.max_speed:.9g}",
            "thumb": "1" if f.thumb else "0",
        }
    cp.write(out)


def load_robot_config(path_or_file) -> ArmModel:
    cp = configparser.ConfigParser()
    if isinstance(path_or_file, (str, bytes)):
        with open(path_or_file) as f:
            cp.read_file(f)
    else:
        cp.read_file(path_or_file)
    arm = cp["arm"]
    fingers = []
    i = 0
    while f"finger{i}" in cp:
        sec = cp[f"finger{i}"]
        fingers.append(FingerSpec(
            np.array([float(x) for x in sec["base"].split()]),
            np.array([float(x) for x in sec["direction"].split()]),
            np.array([float(x) for x in sec["curl_axis"].split()]),
            tuple(float(x) for x in sec["seg_lengths"].split()),
            float(sec["q_lo"]), float(sec["q_hi"]),
            float(sec["max_speed"]), sec["thumb"].strip() == "1"))
        i += 1
    hand = HandModel(
        _parse_rows(cp["hand"]["palm_points"]), fingers,
        np.array([float(x) for x in cp["hand"]["palm_normal"].split()]),
        np.array([float(x) for x in cp["hand"]["hand_axis"].split()]))
    return ArmModel(
        _parse_rows(arm["offsets"]), _parse_rows(arm["axes"]),
        np.array([float(x) for x in arm["pos_lo"].split()]),
        np.array([float(x) for x in arm["pos_hi"].split()]),
        np.array([float(x) for x in arm["vel_limit"].split()]),
        float(arm["accel_limit"]),
        np.array([float(x) for x in arm["palm_offset"].split()]),
        hand)
