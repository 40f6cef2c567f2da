"""Catching-pose quality: the ground-truth score, the N x M x K supervised
data-collection procedure, quality-network training, and target-pose
selection along a predicted trajectory.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .flight import ObjectShape, ObjectState, SimConfig, TossRanges, sample_toss, simulate_trajectory, training_shapes
from .geometry import (
    RigidPose,
    normalize,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    rotation_between,
)
from .nn import (
    F32,
    Mlp,
    adam_init,
    adam_step,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_forward_cache,
    mlp_from_tensors,
    save_checkpoint,
)
from .policies import approach_vector, policy_act, reach_observation
from .robot import (
    ArmModel,
    IkError,
    check_termination,
    default_robot,
    hand_vectors,
    ik_solve_pose,
    ik_velocity,
    kinematic_arm_step,
    make_hand_arm_state,
)

QUALITY_IN_DIM = 14  # object pose (7) + hand pose (7)
SCORE_MIN_FEASIBLE = 0.1
QUALITY_INPUT_SCALE = np.array(
    [2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0],
    dtype=F32)


def score(J_d: np.ndarray, J_now: np.ndarray, p_d_h: np.ndarray,
          p_o: np.ndarray, u_n: np.ndarray, v: np.ndarray) -> float:
    """Catching-pose quality in [0, 2]: joint-space effort, hand-object
    proximity, and palm alignment against the object's motion."""
    speed = float(np.linalg.norm(v))
    if speed == 0.0:
        raise ValueError("score undefined for zero object velocity")
    joint_term = math.exp(-float(np.linalg.norm(
        np.asarray(J_d, dtype=float) - np.asarray(J_now, dtype=float))))
    dist_term = math.exp(-float(np.linalg.norm(
        np.asarray(p_d_h, dtype=float) - np.asarray(p_o, dtype=float))))
    align_term = 1.0 - float(np.dot(u_n, v)) / speed
    return joint_term * dist_term * align_term


@dataclass
class PoseTupleSample:
    obj_pose: RigidPose
    hand_pose: RigidPose
    obj_vel: np.ndarray
    J_now: np.ndarray
    J_d: np.ndarray
    p_d_h: np.ndarray
    score: float

    def row(self) -> np.ndarray:
        return np.concatenate([self.obj_pose.as_array(),
                               self.hand_pose.as_array(), self.obj_vel,
                               self.J_now, self.J_d, self.p_d_h,
                               [self.score]])

    @staticmethod
    def from_row(row: np.ndarray) -> "PoseTupleSample":
        return PoseTupleSample(
            RigidPose.from_array(row[0:7]), RigidPose.from_array(row[7:14]),
            row[14:17].copy(), row[17:24].copy(), row[24:31].copy(),
            row[31:34].copy(), float(row[34]))


@dataclass
class QualityDataset:
    samples: list
    n_trajectories: int = 0
    m_poses: int = 0
    k_hand_poses: int = 0
    seed: int = 0
    skipped: int = 0

    def __len__(self):
        return len(self.samples)


ROW_WIDTH = 35
QUALITY_MAGIC = b"CPQD"
QUALITY_VERSION = 1


class QualityFormatError(Exception):
    pass


def save_quality_dataset(path: str, ds: QualityDataset) -> None:
    with open(path, "wb") as f:
        f.write(QUALITY_MAGIC)
        f.write(struct.pack("<H", QUALITY_VERSION))
        f.write(struct.pack("<IIIQI I".replace(" ", ""), ds.n_trajectories,
                            ds.m_poses, ds.k_hand_poses, ds.seed,
                            len(ds.samples), ds.skipped))
        rows = np.array([s.row() for s in ds.samples], dtype="<f8")
        f.write(rows.tobytes())


def load_quality_dataset(path: str) -> QualityDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != QUALITY_MAGIC:
        raise QualityFormatError(f"bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != QUALITY_VERSION:
        raise QualityFormatError(f"unsupported version {version}")
    n, m, k, seed, count, skipped = struct.unpack_from("<IIIQII", raw, 6)
    off = 6 + struct.calcsize("<IIIQII")
    need = count * ROW_WIDTH * 8
    if len(raw) - off < need:
        raise QualityFormatError("truncated quality dataset")
    rows = np.frombuffer(raw[off:off + need], dtype="<f8").reshape(count, ROW_WIDTH)
    samples = [PoseTupleSample.from_row(r) for r in rows]
    return QualityDataset(samples, n, m, k, seed, skipped)


def export_quality_text(ds: QualityDataset, out: io.TextIOBase) -> None:
    out.write("# obj_pose(7) hand_pose(7) obj_vel(3) J_now(7) J_d(7) "
              "p_d_h(3) score\n")
    out.write(f"# N={ds.n_trajectories} M={ds.m_poses} K={ds.k_hand_poses} "
              f"seed={ds.seed} skipped={ds.skipped}\n")
    for s in ds.samples:
        out.write(" ".join(f"{x:.9g}" for x in s.row()) + "\n")


# ---------------------------------------------------------------------------
# Data collection

@dataclass
class QualityCollectConfig:
    sim: SimConfig = field(default_factory=lambda: SimConfig(dt_physics=0.002))
    ranges: TossRanges = field(default_factory=TossRanges)
    shapes: list = field(default_factory=training_shapes)
    settle_time: float = 0.5
    control_dt: float = 0.02
    flight_duration: float = 1.0
    hand_lo: np.ndarray = field(default_factory=lambda: np.array([0.35, -0.65, 0.55]))
    hand_hi: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.15, 1.25]))
    cone_half_angle: float = math.radians(60.0)
    seed: int = 0


def _sample_hand_pose(rng: np.random.Generator, cfg: QualityCollectConfig,
                      toss_vel: np.ndarray) -> RigidPose:
    """Hand pose in the workspace box, palm within a cone around the
    direction facing the incoming object."""
    pos = rng.uniform(cfg.hand_lo, cfg.hand_hi)
    face = -normalize(toss_vel)
    cos_t = rng.uniform(math.cos(cfg.cone_half_angle), 1.0)
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(ref, face))) > 0.99:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = normalize(np.cross(face, ref))
    e2 = np.cross(face, e1)
    u_n = cos_t * face + sin_t * (math.cos(phi) * e1 + math.sin(phi) * e2)
    q = rotation_between(np.array([0.0, 0.0, 1.0]), u_n)
    roll = quat_from_axis_angle(u_n, rng.uniform(-math.pi, math.pi))
    return RigidPose(pos, quat_normalize(quat_multiply(roll, q)))


def _settle_reach(model: ArmModel, reach_policy, q0: np.ndarray,
                  target: ObjectState, shape: ObjectShape,
                  settle_time: float, control_dt: float):
    """Run the reaching policy against a frozen object; returns the final
    hand-arm state (contacts disabled, per the reach training setup)."""
    hand = make_hand_arm_state(model, q0)
    v_a = approach_vector(target, shape)
    steps = int(round(settle_time / control_dt))
    for _ in range(steps):
        obs = reach_observation(target, hand.hand_pose, v_a)
        action, _, _ = policy_act(reach_policy, obs, stochastic=False)
        q = hand.hand_pose.orientation
        twist = np.concatenate([quat_rotate(q, action[:3]),
                                quat_rotate(q, action[3:6])])
        dq, _ = ik_velocity(model, hand.arm_q, twist)
        kinematic_arm_step(model, hand, dq, control_dt)
    return hand


def collect_dataset(N: int, M: int, K: int, model: ArmModel, reach_policy,
                    cfg: QualityCollectConfig | None = None) -> QualityDataset:
    """N trajectories x M poses along each x K initial hand poses.

    For every tuple the object is frozen at the recorded pose (keeping its
    recorded flight velocity), the robot starts from a sampled hand pose
    (solved by IK; failures are skipped and counted), the trained reaching
    policy runs for the settle time, and the resulting configuration scores
    the tuple. Deterministic under cfg.seed.
    """
    if cfg is None:
        cfg = QualityCollectConfig()
    samples = []
    skipped = 0
    children = np.random.SeedSequence(cfg.seed).spawn(N)
    for i in range(N):
        rng = np.random.Generator(np.random.PCG64(children[i]))
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        toss = sample_toss(rng, cfg.ranges, cfg.sim)
        traj = simulate_trajectory(toss, shape, cfg.sim, cfg.flight_duration)
        t_last = traj.data[-1, 0]
        interval = (t_last - 0.1) / M
        for j in range(M):
            t_j = 0.1 + (j + 0.5) * interval
            idx = min(traj.n_samples - 1, max(3, int(round(t_j / 0.01))))
            row = traj.data[idx]
            obj_pose = RigidPose(row[1:4].copy(), quat_normalize(row[4:8]))
            obj_vel = row[8:11].copy()
            target = ObjectState(obj_pose, obj_vel, row[11:14].copy())
            for _ in range(K):
                hand_pose = _sample_hand_pose(rng, cfg, toss.lin_vel)
                try:
                    q_ik = ik_solve_pose(model, hand_pose, q0=None)
                except IkError:
                    skipped += 1
                    continue
                if check_termination(model, q_ik, np.zeros(model.dof)) != "ok":
                    skipped += 1
                    continue
                hand = _settle_reach(model, reach_policy, q_ik, target, shape,
                                     cfg.settle_time, cfg.control_dt)
                u_n, _ = hand_vectors(model, hand.hand_pose)
                s = score(hand.arm_q, q_ik, hand.hand_pose.position,
                          obj_pose.position, u_n, obj_vel)
                samples.append(PoseTupleSample(
                    obj_pose, hand_pose, obj_vel, q_ik.copy(),
                    hand.arm_q.copy(), hand.hand_pose.position.copy(), s))
    return QualityDataset(samples, N, M, K, cfg.seed, skipped)


# ---------------------------------------------------------------------------
# Network, training, and target selection

@dataclass
class QualityNet:
    """Pose-pair scoring network; output head spans the [0, 2] score range."""

    mlp: Mlp
    input_scale: np.ndarray = field(default_factory=lambda: QUALITY_INPUT_SCALE.copy())

    def tensors(self) -> dict:
        out = self.mlp.params("q/")
        out["input_scale"] = self.input_scale
        return out

    def save(self, path: str) -> None:
        save_checkpoint(path, self.tensors())

    @staticmethod
    def from_tensors(t: dict) -> "QualityNet":
        return QualityNet(mlp_from_tensors(t, "q/", out_act="sigmoid2"),
                          t["input_scale"])

    @staticmethod
    def load(path: str) -> "QualityNet":
        return QualityNet.from_tensors(load_checkpoint(path))

    def score_pairs(self, obj_pose_rows: np.ndarray,
                    hand_pose: RigidPose) -> np.ndarray:
        """Score (H, 7) object pose rows against one hand pose."""
        h = len(obj_pose_rows)
        x = np.empty((h, QUALITY_IN_DIM), dtype=F32)
        x[:, 0:7] = obj_pose_rows
        x[:, 7:14] = hand_pose.as_array()
        x /= self.input_scale
        return mlp_forward(self.mlp, x)[:, 0]


def init_quality(rng: np.random.Generator, hidden=(100, 100)) -> QualityNet:
    return QualityNet(Mlp.init((QUALITY_IN_DIM, *hidden, 1), rng,
                               out_act="sigmoid2"))


@dataclass
class QualityTrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 3e-4
    holdout_fraction: float = 0.1
    seed: int = 0
    hidden: tuple = (100, 100)


def train_quality(dataset: QualityDataset,
                  cfg: QualityTrainConfig | None = None):
    """Supervised regression of the pose-pair score; returns (net, report)."""
    if len(dataset) < 100:
        raise ValueError(f"dataset too small ({len(dataset)} samples)")
    if cfg is None:
        cfg = QualityTrainConfig()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    net = init_quality(rng, cfg.hidden)
    X = np.array([np.concatenate([s.obj_pose.as_array(),
                                  s.hand_pose.as_array()])
                  for s in dataset.samples], dtype=F32) / net.input_scale
    Y = np.array([[s.score] for s in dataset.samples], dtype=F32)
    perm = rng.permutation(len(X))
    n_hold = max(1, int(round(cfg.holdout_fraction * len(X))))
    hold, train = perm[:n_hold], perm[n_hold:]
    params = net.mlp.params()
    adam = adam_init(params, lr=cfg.lr)
    report = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        running, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            mb = train[order[s:s + cfg.batch_size]]
            pred, cache = mlp_forward_cache(net.mlp, X[mb])
            err = pred - Y[mb]
            running += float(np.sum(err ** 2))
            seen += err.size
            grads, _ = mlp_backward(net.mlp, cache, (2.0 / err.size) * err)
            adam_step(params, grads, adam)
        hold_pred = mlp_forward(net.mlp, X[hold])
        hold_mse = float(np.mean((hold_pred - Y[hold]) ** 2))
        report.append((epoch, running / seen, hold_mse))
    return net, report


@dataclass
class TargetSelection:
    index: int
    score: float
    feasible: bool


def select_target(net: QualityNet, predicted, hand_pose: RigidPose,
                  s_min: float = SCORE_MIN_FEASIBLE) -> TargetSelection:
    """Highest-scoring predicted pose; ties break toward the earliest pose
    (more reaction margin). Below s_min the selection is flagged infeasible."""
    if predicted.horizon_count < 1:
        raise ValueError("empty predicted trajectory")
    scores = net.score_pairs(predicted.vectors[:, 0:7], hand_pose)
    idx = int(np.argmax(scores))
    best = float(scores[idx])
    return TargetSelection(idx, best, best >= s_min)
