"""Control policies: observation construction, reward functions, approach
vector, squashed-Gaussian action heads, and reach/grasp action blending.

All observation vectors are expressed in the hand frame (relative poses and
rotated velocity/approach vectors) and actions are hand-frame twists, so the
policies see a base-invariant problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .flight import ObjectShape, ObjectState
from .geometry import (
    RigidPose,
    normalize,
    quat_conjugate,
    quat_rotate,
    relative_pose,
)
from .nn import (
    F32,
    Mlp,
    load_checkpoint,
    mlp_forward,
    mlp_from_tensors,
    save_checkpoint,
)

LIN_VEL_LIMIT = 2.5   # m/s hand linear velocity command bound
ANG_VEL_LIMIT = 4.0   # rad/s hand angular velocity command bound

REACH_OBS_DIM = 10    # rel position 3 + rel quaternion 4 + approach vector 3
GRASP_OBS_DIM = 21    # rel pose 7 + object vel 3 + hand vel 3 + finger joints 8
GATE_OBS_DIM = REACH_OBS_DIM + GRASP_OBS_DIM

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
MIN_SPEED_FOR_APPROACH = 0.05


def approach_vector(obj_state: ObjectState, shape: ObjectShape) -> np.ndarray:
    """Desired unit approach direction for the hand.

    Spheres (no major axis): the unit linear velocity. Major-axis objects:
    the unit vector orthogonal to the world-frame axis, lying in the
    gravity-velocity plane, oriented positively along the velocity; falls
    back to removing the axis component of v when that plane degenerates
    onto the axis.
    """
    v = obj_state.lin_vel
    speed = float(np.linalg.norm(v))
    if shape.major_axis is None:
        if speed < MIN_SPEED_FOR_APPROACH:
            raise ValueError("approach vector undefined for near-static sphere")
        return v / speed
    axis = quat_rotate(obj_state.pose.orientation, shape.major_axis)
    g = np.array([0.0, 0.0, -1.0])
    plane_normal = np.cross(g, v)
    d = np.cross(plane_normal, axis)
    dn = float(np.linalg.norm(d))
    if np.linalg.norm(plane_normal) > 1e-9 and dn > 1e-9 \
            and abs(float(np.dot(d, v))) > 1e-12:
        d = d / dn
        if float(np.dot(d, v)) < 0.0:
            d = -d
        return d
    # degenerate: project the velocity (or gravity) off the axis; if the
    # axis is aligned with both, any perpendicular works (full symmetry)
    fallbacks = (v, g, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    for ref in fallbacks:
        cand = ref - float(np.dot(ref, axis)) * axis
        n = float(np.linalg.norm(cand))
        if n > 1e-9:
            return cand / n
    raise ValueError("approach vector undefined")


def reward_reach(key_points: np.ndarray, p_o: np.ndarray, u_n: np.ndarray,
                 v_a: np.ndarray, u_x: np.ndarray,
                 v_x: np.ndarray | None) -> float:
    """Reaching reward: key-point proximity to the target object position,
    palm-normal alignment against the approach vector, and hand-axis
    alignment with the object's major axis (skipped for axis-free shapes)."""
    kp = np.asarray(key_points, dtype=float)
    if kp.ndim != 2 or len(kp) < 1:
        raise ValueError("need at least one key-point")
    dist = float(np.mean(np.linalg.norm(kp - p_o, axis=1)))
    r = -dist - float(np.dot(u_n, v_a))
    if v_x is not None:
        r += abs(float(np.dot(u_x, v_x)))
    return r


def reward_grasp(key_points: np.ndarray, p_o: np.ndarray, n_c: int, k: int,
                 p_h: np.ndarray, v_h: np.ndarray, v_o: np.ndarray) -> float:
    """Grasping reward: key-point proximity to the real-time object position,
    contact fraction, and the piecewise soft-catch term (velocity matching
    before contact, stillness after)."""
    if not 0 <= n_c <= k:
        raise ValueError("contact count out of range")
    kp = np.asarray(key_points, dtype=float)
    dist = float(np.mean(np.linalg.norm(kp - p_o, axis=1)))
    if n_c == 0:
        r_p = math.exp(-float(np.linalg.norm(p_h - p_o))) * float(np.dot(v_h, v_o))
    else:
        r_p = math.exp(-float(np.linalg.norm(v_h)))
    return -dist + n_c / k + r_p


def blend_reward(w_g: float, r_reach: float, r_grasp: float) -> float:
    """Gating reward: (1 - w_g) * R_reach + w_g * R_grasp."""
    if not 0.0 <= w_g <= 1.0:
        raise ValueError("w_g must be in [0, 1]")
    return (1.0 - w_g) * r_reach + w_g * r_grasp


def blend_actions(w_g: float, a_reach: np.ndarray, a_grasp: np.ndarray,
                  open_fingers: np.ndarray) -> np.ndarray:
    """Blend reach (6) and grasp (6 + fingers) actions into one grasp-shaped
    action; the reach policy's implicit finger command is the open posture."""
    if not 0.0 <= w_g <= 1.0:
        raise ValueError("w_g must be in [0, 1]")
    a_reach = np.asarray(a_reach, dtype=float)
    a_grasp = np.asarray(a_grasp, dtype=float)
    out = np.empty(6 + len(open_fingers))
    out[:6] = (1.0 - w_g) * a_reach[:6] + w_g * a_grasp[:6]
    out[6:] = (1.0 - w_g) * open_fingers + w_g * a_grasp[6:]
    return out


# ---------------------------------------------------------------------------
# Observation assembly (hand frame)

def reach_observation(target: ObjectState, hand_pose: RigidPose,
                      v_a_world: np.ndarray) -> np.ndarray:
    rel = relative_pose(target.pose, hand_pose)
    qi = quat_conjugate(hand_pose.orientation)
    return np.concatenate([rel.position, rel.orientation,
                           quat_rotate(qi, v_a_world)]).astype(F32)


def grasp_observation(obj: ObjectState, hand_pose: RigidPose,
                      hand_lin_vel: np.ndarray,
                      finger_q: np.ndarray) -> np.ndarray:
    rel = relative_pose(obj.pose, hand_pose)
    qi = quat_conjugate(hand_pose.orientation)
    return np.concatenate([rel.position, rel.orientation,
                           quat_rotate(qi, obj.lin_vel),
                           quat_rotate(qi, hand_lin_vel),
                           finger_q]).astype(F32)


def gate_observation(reach_obs: np.ndarray, grasp_obs: np.ndarray) -> np.ndarray:
    return np.concatenate([reach_obs, grasp_obs]).astype(F32)


# ---------------------------------------------------------------------------
# Policy parameters and the squashed-Gaussian action head

@dataclass
class PolicyParams:
    """Gaussian policy with tanh squashing to box bounds, plus a value net."""

    mlp: Mlp
    log_std: np.ndarray
    value: Mlp
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self._center = 0.5 * (self.lo + self.hi)
        self._scale = 0.5 * (self.hi - self.lo)

    @property
    def act_dim(self) -> int:
        return len(self.lo)

    @property
    def obs_dim(self) -> int:
        return self.mlp.sizes[0]

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def params(self) -> dict:
        out = self.mlp.params("pi/")
        out["log_std"] = self.log_std
        out.update(self.value.params("vf/"))
        return out

    def tensors(self) -> dict:
        out = self.params()
        out["bounds_lo"] = self.lo.astype(F32)
        out["bounds_hi"] = self.hi.astype(F32)
        return out

    def save(self, path: str) -> None:
        save_checkpoint(path, self.tensors())

    @staticmethod
    def from_tensors(t: dict) -> "PolicyParams":
        return PolicyParams(mlp_from_tensors(t, "pi/"), t["log_std"].copy(),
                            mlp_from_tensors(t, "vf/"),
                            t["bounds_lo"].astype(np.float64),
                            t["bounds_hi"].astype(np.float64))

    @staticmethod
    def load(path: str) -> "PolicyParams":
        return PolicyParams.from_tensors(load_checkpoint(path))


def make_policy(obs_dim: int, lo, hi, rng: np.random.Generator,
                hidden=(256, 256), log_std_init: float = -0.5) -> PolicyParams:
    lo = np.asarray(lo, dtype=np.float64)
    act_dim = len(lo)
    mlp = Mlp.init((obs_dim, *hidden, act_dim), rng)
    # a small head keeps early pre-squash means near the center of the range
    mlp.weights[-1] *= 0.01
    value = Mlp.init((obs_dim, *hidden, 1), rng)
    return PolicyParams(mlp, np.full(act_dim, log_std_init, dtype=F32),
                        value, lo, np.asarray(hi, dtype=np.float64))


def reach_action_bounds():
    lo = np.array([-LIN_VEL_LIMIT] * 3 + [-ANG_VEL_LIMIT] * 3)
    return lo, -lo


def grasp_action_bounds(finger_lo: np.ndarray, finger_hi: np.ndarray):
    lo = np.concatenate([[-LIN_VEL_LIMIT] * 3, [-ANG_VEL_LIMIT] * 3, finger_lo])
    hi = np.concatenate([[LIN_VEL_LIMIT] * 3, [ANG_VEL_LIMIT] * 3, finger_hi])
    return lo, hi


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2) computed stably for large |u|."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squash_log_prob(params: PolicyParams, mean: np.ndarray, u: np.ndarray) -> float:
    """Log density of action = center + scale * tanh(u) under the Gaussian
    with the current mean/std, including the tanh change of variables."""
    std = np.exp(params.log_std.astype(np.float64))
    z = (u - mean) / std
    gauss = -0.5 * z * z - np.log(std) - 0.5 * math.log(2.0 * math.pi)
    corr = _log1m_tanh_sq(u) + np.log(params._scale)
    return float(np.sum(gauss - corr))


def policy_act(params: PolicyParams, obs: np.ndarray, stochastic: bool,
               rng: np.random.Generator | None = None):
    """Returns (action, log_prob, pre_squash_sample).

    Deterministic mode returns the squashed mean; stochastic mode samples in
    pre-squash space (the sample is what PPO stores for ratio computation).
    """
    obs = np.asarray(obs, dtype=F32)
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    mean = mlp_forward(params.mlp, obs).astype(np.float64)
    if stochastic:
        if rng is None:
            raise ValueError("stochastic action needs an RNG")
        std = np.exp(params.log_std.astype(np.float64))
        u = mean + std * rng.standard_normal(params.act_dim)
    else:
        u = mean.copy()
    action = params._center + params._scale * np.tanh(u)
    return action, squash_log_prob(params, mean, u), u


def policy_value(params: PolicyParams, obs: np.ndarray) -> float:
    return float(mlp_forward(params.value, np.asarray(obs, dtype=F32))[0])
