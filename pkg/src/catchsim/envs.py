"""Training environments for the three control policies, plus the shared
pipeline engine (prediction at 100 Hz, control at 50 Hz, physics at 500 Hz)
reused by the evaluation harness.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .flight import ObjectShape, ObjectState, SimConfig, TossRanges, sample_toss, training_shapes
from .geometry import RigidPose, quat_rotate
from .policies import (
    GATE_OBS_DIM,
    GRASP_OBS_DIM,
    REACH_OBS_DIM,
    PolicyParams,
    approach_vector,
    blend_actions,
    gate_observation,
    grasp_action_bounds,
    grasp_observation,
    policy_act,
    reach_action_bounds,
    reach_observation,
    reward_grasp,
    reward_reach,
)
from .predictor import HistoryBuffer, PredictorBundle, rollout
from .quality import QualityNet, select_target
from .robot import (
    DEFAULT_HOME_Q,
    ArmModel,
    ContactParams,
    GraspWindowSample,
    HandArmState,
    check_termination,
    coupled_step,
    default_robot,
    grasp_secured,
    hand_vectors,
    ik_velocity,
    keypoints_world,
    kinematic_arm_step,
    make_hand_arm_state,
)

CONTROL_DT = 0.02        # 50 Hz policy rate
PHYSICS_DT = 0.002       # 500 Hz physics rate
SUBSTEPS = 10            # physics substeps per control period
PREDICT_EVERY = 5        # physics substeps between 100 Hz predictor ticks
TRIAL_DURATION = 2.0
PREP_TIME_RANGE = (0.05, 0.25)
CONTACT_LOOKAHEAD_HORIZON = 10   # short prediction horizon while in contact


class ConfigError(ValueError):
    pass


@dataclass
class EnvAssets:
    """Everything the catching environments share."""

    model: ArmModel = field(default_factory=default_robot)
    sim: SimConfig = field(default_factory=lambda: SimConfig(dt_physics=PHYSICS_DT))
    contact: ContactParams = field(default_factory=ContactParams)
    ranges: TossRanges = field(default_factory=TossRanges)
    shapes: list = field(default_factory=training_shapes)
    predictor: PredictorBundle | None = None
    quality: QualityNet | None = None
    reach_policy: PolicyParams | None = None
    grasp_policy: PolicyParams | None = None
    horizon: int = 70
    home_q: np.ndarray = field(default_factory=lambda: DEFAULT_HOME_Q.copy())


class CatchEngine:
    """One toss episode: object physics, hand control, prediction, selection.

    Drives coupled physics at 500 Hz with 100 Hz predictor/selection ticks.
    The caller supplies control twists at 50 Hz boundaries. Observation of
    the object pose can be overridden (noise injection) via observe_fn.
    """

    def __init__(self, assets: EnvAssets, observe_fn=None, substep_hook=None):
        self.a = assets
        self.observe_fn = observe_fn
        self.substep_hook = substep_hook
        self.reset_counters()

    def reset_counters(self):
        self.substep_count = 0
        self.terminated = None

    @property
    def t(self) -> float:
        return self.substep_count * PHYSICS_DT

    def reset(self, toss: ObjectState, shape: ObjectShape):
        self.reset_counters()
        self.shape = shape
        self.obj = toss.copy()
        self.hand = make_hand_arm_state(self.a.model, self.a.home_q,
                                        self.a.model.hand.open_finger_q())
        self.buffer = HistoryBuffer(self.a.predictor.history
                                    if self.a.predictor else 10)
        self.target_state: ObjectState | None = None
        self.target_time = 0.0
        self.target_score = 0.0
        self.target_feasible = False
        self.v_a_world = np.array([-1.0, 0.0, 0.0])
        self.v_x_world = None
        self.last_report = None
        self.last_contact_t = -1.0
        self.grasp_hist: deque = deque(maxlen=256)
        self._prev_dq_cmd = np.zeros(self.a.model.dof)
        self.predictor_ticks = 0
        self.control_ticks = 0

    # -- prediction / selection -------------------------------------------

    def _predictor_tick(self):
        self.predictor_ticks += 1
        pose = self.obj.pose
        if self.observe_fn is not None:
            pose = self.observe_fn(pose, self.t)
        self.buffer.update(pose, self.t)
        if not self.buffer.full or self.a.predictor is None \
                or self.a.quality is None:
            return
        horizon = self.a.horizon
        if self.t - self.last_contact_t <= 0.1 and self.last_contact_t >= 0.0:
            horizon = min(horizon, CONTACT_LOOKAHEAD_HORIZON)
        pred = rollout(self.a.predictor, self.buffer, horizon)
        sel = select_target(self.a.quality, pred, self.hand.hand_pose)
        self.target_state = pred.state_at(sel.index)
        self.target_time = pred.time_of(sel.index)
        self.target_score = sel.score
        self.target_feasible = sel.feasible
        try:
            self.v_a_world = approach_vector(self.target_state, self.shape)
        except ValueError:
            pass  # near-static target: keep the previous approach direction
        if self.shape.major_axis is not None:
            self.v_x_world = quat_rotate(self.target_state.pose.orientation,
                                         self.shape.major_axis)

    @property
    def time_to_target(self) -> float | None:
        if self.target_state is None:
            return None
        return self.target_time - self.t

    # -- observations -------------------------------------------------------

    def reach_obs(self) -> np.ndarray:
        return reach_observation(self.target_state, self.hand.hand_pose,
                                 self.v_a_world)

    def grasp_obs(self) -> np.ndarray:
        return grasp_observation(self.obj, self.hand.hand_pose,
                                 self.hand.hand_lin_vel, self.hand.finger_q)

    def gate_obs(self) -> np.ndarray:
        return gate_observation(self.reach_obs(), self.grasp_obs())

    # -- control and physics -------------------------------------------------

    def apply_control(self, twist_hand: np.ndarray,
                      finger_targets: np.ndarray) -> str:
        """Convert a hand-frame twist command into joint velocities.

        Returns the termination classification for this command.
        """
        self.control_ticks += 1
        q = self.hand.hand_pose.orientation
        twist_world = np.concatenate([quat_rotate(q, twist_hand[:3]),
                                      quat_rotate(q, twist_hand[3:6])])
        from .robot import jacobian
        J = jacobian(self.a.model, self.hand.arm_q)
        dq, _ = ik_velocity(self.a.model, self.hand.arm_q, twist_world, J=J)
        cmd_accel = (dq - self._prev_dq_cmd) / CONTROL_DT
        self._prev_dq_cmd = dq
        self.hand.arm_dq = dq
        self.hand.finger_targets = np.asarray(finger_targets, dtype=float).copy()
        reason = check_termination(self.a.model, self.hand.arm_q,
                                   self.hand.arm_dq, cmd_accel, J=J)
        if reason != "ok":
            self.terminated = reason
        return reason

    def idle_control(self):
        self.control_ticks += 1
        self._prev_dq_cmd = np.zeros(self.a.model.dof)
        self.hand.arm_dq = np.zeros(self.a.model.dof)

    def run_substeps(self, n: int):
        """Advance n physics substeps, ticking the predictor at 100 Hz."""
        for _ in range(n):
            if self.substep_count % PREDICT_EVERY == 0:
                self._predictor_tick()
            self.hand, self.obj, report = coupled_step(
                self.a.model, self.hand, self.obj, self.shape, self.a.sim,
                PHYSICS_DT, self.a.contact)
            self.substep_count += 1
            self.last_report = report
            if report.n_c > 0:
                self.last_contact_t = self.t
            if self.substep_hook is not None:
                self.substep_hook(self)

    def record_grasp_sample(self):
        report = self.last_report
        roles = self.a.model.hand.keypoint_roles()
        touched = {roles[i] for i in report.indices} if report is not None else set()
        self.grasp_hist.append(GraspWindowSample(
            self.t, report.n_c if report is not None else 0,
            any(r.startswith("thumb") for r in touched),
            any(r.startswith("finger") for r in touched),
            float(np.linalg.norm(self.obj.lin_vel - self.hand.hand_lin_vel)),
            float(self.obj.pose.position[2])))

    def secured(self) -> bool:
        return grasp_secured(self.grasp_hist, 0.2)

    def dropped(self) -> bool:
        return self.obj.pose.position[2] < 0.7 * self.shape.bottom_clearance()

    # -- rewards ---------------------------------------------------------------

    def keypoints(self) -> np.ndarray:
        return keypoints_world(self.a.model, self.hand.hand_pose,
                               self.hand.finger_q)

    def reach_reward(self) -> float:
        u_n, u_x = hand_vectors(self.a.model, self.hand.hand_pose)
        return reward_reach(self.keypoints(), self.target_state.pose.position,
                            u_n, self.v_a_world, u_x, self.v_x_world)

    def grasp_reward(self) -> float:
        n_c = self.last_report.n_c if self.last_report is not None else 0
        return reward_grasp(self.keypoints(), self.obj.pose.position, n_c,
                            self.a.model.hand.n_keypoints,
                            self.hand.hand_pose.position,
                            self.hand.hand_lin_vel, self.obj.lin_vel)


# ---------------------------------------------------------------------------
# Reaching environment: object fixed at a random pose, contacts disabled.

WORKSPACE_LO = np.array([0.35, -0.65, 0.55])
WORKSPACE_HI = np.array([0.85, 0.15, 1.25])


class ReachEnv:
    """Reach a fixed object pose as fast and as well-aligned as possible."""

    obs_dim = REACH_OBS_DIM

    def __init__(self, assets: EnvAssets | None = None, episode_len: int = 100):
        self.a = assets or EnvAssets()
        self.episode_len = episode_len
        self.open_q = self.a.model.hand.open_finger_q()

    def action_bounds(self):
        return reach_action_bounds()

    def reset(self, rng: np.random.Generator):
        m = self.a.model
        shape = self.a.shapes[int(rng.integers(len(self.a.shapes)))]
        pos = rng.uniform(WORKSPACE_LO, WORKSPACE_HI)
        toss = sample_toss(rng, self.a.ranges, self.a.sim)
        target = ObjectState(RigidPose(pos, toss.pose.orientation),
                             toss.lin_vel, toss.ang_vel)
        for _ in range(40):
            q = self.a.home_q + rng.uniform(-0.4, 0.4, m.dof)
            q = np.clip(q, 0.95 * m.pos_lo, 0.95 * m.pos_hi)
            if check_termination(m, q, np.zeros(m.dof)) == "ok":
                break
        self.hand = make_hand_arm_state(m, q, self.open_q)
        self.shape = shape
        self.target = target
        self.v_a = approach_vector(target, shape)
        if shape.major_axis is not None:
            self.v_x = quat_rotate(target.pose.orientation, shape.major_axis)
        else:
            self.v_x = None
        self._prev_dq = np.zeros(m.dof)
        self.steps = 0
        self.best_dist = np.inf
        return self._obs()

    def _obs(self):
        return reach_observation(self.target, self.hand.hand_pose, self.v_a)

    def step(self, action):
        m = self.a.model
        q = self.hand.hand_pose.orientation
        twist_world = np.concatenate([quat_rotate(q, action[:3]),
                                      quat_rotate(q, action[3:6])])
        from .robot import jacobian
        dq, _ = ik_velocity(m, self.hand.arm_q, twist_world,
                            J=jacobian(m, self.hand.arm_q))
        cmd_accel = (dq - self._prev_dq) / CONTROL_DT
        self._prev_dq = dq
        kinematic_arm_step(m, self.hand, dq, CONTROL_DT)
        pose = self.hand.hand_pose
        eff_dq = self.hand.arm_dq
        self.steps += 1
        kp = keypoints_world(m, pose, self.hand.finger_q)
        u_n, u_x = hand_vectors(m, pose)
        reward = reward_reach(kp, self.target.pose.position, u_n, self.v_a,
                              u_x, self.v_x)
        dist = float(np.mean(np.linalg.norm(
            kp - self.target.pose.position, axis=1)))
        self.best_dist = min(self.best_dist, dist)
        reason = check_termination(m, self.hand.arm_q, eff_dq, cmd_accel,
                                   J=jacobian(m, self.hand.arm_q))
        done = False
        info = {"term_reason": ""}
        if reason != "ok":
            reward -= 1.0
            done = True
            info["term_reason"] = reason
        elif self.steps >= self.episode_len:
            done = True
        info["success"] = dist < 0.10
        return self._obs(), reward, done, info


# ---------------------------------------------------------------------------
# Grasping environment: full toss, reaching policy drives until handover.

class GraspEnv:
    """Soft-catch training: control starts when the object is T seconds out."""

    obs_dim = GRASP_OBS_DIM

    def __init__(self, assets: EnvAssets, prep_range=PREP_TIME_RANGE,
                 episode_len_s: float = TRIAL_DURATION):
        for name in ("predictor", "quality", "reach_policy"):
            if getattr(assets, name) is None:
                raise ConfigError(f"grasp setup requires a trained {name}")
        self.a = assets
        self.prep_range = prep_range
        self.episode_len_s = episode_len_s
        self.open_q = assets.model.hand.open_finger_q()
        self.engine = CatchEngine(assets)

    def action_bounds(self):
        hand = self.a.model.hand
        return grasp_action_bounds(hand.finger_q_lo(), hand.finger_q_hi())

    def reset(self, rng: np.random.Generator):
        for _ in range(40):
            if self._try_reset(rng):
                return self.engine.grasp_obs()
        raise RuntimeError("grasp env could not set up a handover episode")

    def _try_reset(self, rng) -> bool:
        eng = self.engine
        shape = self.a.shapes[int(rng.integers(len(self.a.shapes)))]
        toss = sample_toss(rng, self.a.ranges, self.a.sim)
        T = float(rng.uniform(*self.prep_range))
        eng.reset(toss, shape)
        self.T = T
        while eng.t < 1.2:
            tt = eng.time_to_target
            if tt is not None and tt <= T:
                return True
            if eng.target_state is not None:
                a_r, _, _ = policy_act(self.a.reach_policy, eng.reach_obs(),
                                       stochastic=False)
                eng.apply_control(a_r, self.open_q)
            else:
                eng.idle_control()
            if eng.terminated:
                return False
            eng.run_substeps(SUBSTEPS)
            eng.record_grasp_sample()
            if eng.dropped():
                return False
        return False

    def step(self, action):
        eng = self.engine
        eng.apply_control(action[:6], action[6:])
        eng.run_substeps(SUBSTEPS)
        eng.record_grasp_sample()
        reward = eng.grasp_reward()
        done = False
        info = {"term_reason": "", "success": False}
        if eng.terminated:
            reward -= 1.0
            done = True
            info["term_reason"] = eng.terminated
        elif eng.secured():
            done = True
            info["success"] = True
        elif eng.dropped() or eng.t >= self.episode_len_s:
            done = True
        return eng.grasp_obs(), reward, done, info


# ---------------------------------------------------------------------------
# Gating environment: full toss, both policies active, gate blends them.

class GateEnv:
    """Learn the action weight blending reaching into grasping."""

    obs_dim = GATE_OBS_DIM

    def __init__(self, assets: EnvAssets, episode_len_s: float = TRIAL_DURATION):
        for name in ("predictor", "quality", "reach_policy", "grasp_policy"):
            if getattr(assets, name) is None:
                raise ConfigError(f"gate setup requires a trained {name}")
        self.a = assets
        self.open_q = assets.model.hand.open_finger_q()
        self.episode_len_s = episode_len_s
        self.engine = CatchEngine(assets)

    def action_bounds(self):
        return np.array([0.0]), np.array([1.0])

    def reset(self, rng: np.random.Generator):
        for _ in range(40):
            if self._try_reset(rng):
                return self.engine.gate_obs()
        raise RuntimeError("gate env could not start an episode")

    def _try_reset(self, rng) -> bool:
        eng = self.engine
        shape = self.a.shapes[int(rng.integers(len(self.a.shapes)))]
        toss = sample_toss(rng, self.a.ranges, self.a.sim)
        eng.reset(toss, shape)
        while eng.t < 0.5:
            if eng.target_state is not None:
                return True
            eng.idle_control()
            eng.run_substeps(SUBSTEPS)
            eng.record_grasp_sample()
            if eng.dropped():
                return False
        return False

    def step(self, action):
        eng = self.engine
        w_g = float(np.clip(action[0], 0.0, 1.0))
        a_r, _, _ = policy_act(self.a.reach_policy, eng.reach_obs(),
                               stochastic=False)
        a_g, _, _ = policy_act(self.a.grasp_policy, eng.grasp_obs(),
                               stochastic=False)
        blended = blend_actions(w_g, a_r, a_g, self.open_q)
        eng.apply_control(blended[:6], blended[6:])
        eng.run_substeps(SUBSTEPS)
        eng.record_grasp_sample()
        from .policies import blend_reward
        reward = blend_reward(w_g, eng.reach_reward(), eng.grasp_reward())
        done = False
        info = {"term_reason": "", "success": False}
        if eng.terminated:
            reward -= 1.0
            done = True
            info["term_reason"] = eng.terminated
        elif eng.secured():
            done = True
            info["success"] = True
        elif eng.dropped() or eng.t >= self.episode_len_s:
            done = True
        return eng.gate_obs(), reward, done, info


# ---------------------------------------------------------------------------
# 1-D point-mass toy task (trainer sanity checks)

class PointMassEnv:
    """Drive a point on a line to the origin; reward is -|x|."""

    obs_dim = 1

    def __init__(self, episode_len: int = 40):
        self.episode_len = episode_len

    def action_bounds(self):
        return np.array([-1.0]), np.array([1.0])

    def reset(self, rng: np.random.Generator):
        self.x = float(rng.uniform(-1.0, 1.0))
        self.steps = 0
        return np.array([self.x], dtype=np.float32)

    def step(self, action):
        self.x = float(np.clip(self.x + 0.05 * float(action[0]), -1.5, 1.5))
        self.steps += 1
        done = self.steps >= self.episode_len
        return (np.array([self.x], dtype=np.float32), -abs(self.x), done,
                {"success": abs(self.x) < 0.05, "term_reason": ""})


ENV_SETUPS = ("reach", "grasp", "gate")


def make_env(setup: str, assets: EnvAssets):
    """Build the training environment for one EnvSetup value."""
    if setup == "reach":
        return ReachEnv(assets)
    if setup == "grasp":
        return GraspEnv(assets)
    if setup == "gate":
        return GateEnv(assets)
    raise ConfigError(f"unknown environment setup {setup!r}")


def train(setup: str, cfg, assets: EnvAssets, progress=None):
    """Train one policy in its environment setup; returns (policy, curve)."""
    from .ppo import train_policy

    env = make_env(setup, assets)
    return train_policy(env, cfg, progress=progress)
