"""Object state estimation: pose history with numerical differentiation,
one-step LSTM prediction (residual parameterization), and autoregressive
rollout of the future trajectory.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ._fast import lstm_rollout_kernel
from .flight import BURN_IN, SAMPLE_DT, STATE_DIM, ObjectState, Trajectory
from .geometry import (
    RigidPose,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_to_rotvec,
)
from .nn import (
    F32,
    Lstm,
    adam_init,
    adam_step,
    load_checkpoint,
    lstm_backward,
    lstm_forward,
    lstm_forward_cache,
    lstm_from_tensors,
    save_checkpoint,
)

HISTORY_LEN = 10  # 0.1 s of state history at 100 Hz

# fixed per-dimension feature scales (mixed units need conditioning);
# float32 so the values survive the checkpoint round trip unchanged
INPUT_SCALE = np.concatenate([
    np.full(3, 3.0),    # position (m)
    np.full(4, 1.0),    # quaternion
    np.full(3, 5.0),    # linear velocity (m/s)
    np.full(3, 10.0),   # angular velocity (rad/s)
    np.full(3, 12.0),   # linear acceleration (m/s^2)
    np.full(3, 25.0),   # angular acceleration (rad/s^2)
]).astype(F32)

OUTPUT_SCALE = np.concatenate([
    np.full(3, 0.05),
    np.full(4, 0.05),
    np.full(3, 0.10),
    np.full(3, 0.02),
    np.full(3, 0.10),
    np.full(3, 1.00),
]).astype(F32)


class HistoryBuffer:
    """Ring of recent pose observations with derived finite-difference states.

    Velocities use a second-order backward difference (first-order for the
    second sample); angular velocity is the backward quaternion-log rate;
    accelerations are backward differences of those estimates.
    """

    def __init__(self, capacity: int = HISTORY_LEN):
        if capacity < 2:
            raise ValueError("history needs at least 2 entries")
        self.capacity = capacity
        self.states: deque = deque(maxlen=capacity)  # vec19 per entry
        self.times: deque = deque(maxlen=capacity)
        self._raw: deque = deque(maxlen=3)       # (t, position, quat)
        self._prev_v: np.ndarray | None = None
        self._prev_w: np.ndarray | None = None
        self._count = 0

    @property
    def full(self) -> bool:
        return len(self.states) == self.capacity

    @property
    def last_time(self) -> float:
        if not self.times:
            raise ValueError("empty history")
        return self.times[-1]

    def last_state(self) -> ObjectState:
        return ObjectState.from_vector(self.states[-1], self.times[-1])

    def window(self) -> np.ndarray:
        """(capacity, 19) array of the derived states, oldest first."""
        if not self.full:
            raise ValueError("history buffer not full")
        return np.array(self.states)

    def update(self, pose_obs: RigidPose, t: float) -> "HistoryBuffer":
        if self.times and t <= self.times[-1]:
            raise ValueError(f"non-monotone timestamp {t} <= {self.times[-1]}")
        p = pose_obs.position.copy()
        q = quat_normalize(pose_obs.orientation)
        raws = list(self._raw)
        if len(raws) == 0:
            v = np.zeros(3)
            w = np.zeros(3)
        else:
            t1, p1, q1 = raws[-1]
            dt = t - t1
            if len(raws) >= 2:
                _, p2, _ = raws[-2]
                v = (3.0 * p - 4.0 * p1 + p2) / (2.0 * dt)
            else:
                v = (p - p1) / dt
            w = quat_to_rotvec(quat_normalize(
                quat_multiply(q, quat_conjugate(q1)))) / dt
        if self._count >= 2 and self._prev_v is not None:
            dt = t - self.times[-1]
            a = (v - self._prev_v) / dt
            aa = (w - self._prev_w) / dt
        else:
            a = np.zeros(3)
            aa = np.zeros(3)
        vec = np.concatenate([p, q, v, w, a, aa])
        self.states.append(vec)
        self.times.append(t)
        self._raw.append((t, p, q))
        self._prev_v = v
        self._prev_w = w
        self._count += 1
        return self


def update_history(buffer: HistoryBuffer, pose_obs: RigidPose, t: float) -> HistoryBuffer:
    return buffer.update(pose_obs, t)


@dataclass
class PredictedTrajectory:
    """Future object states at 0.01 s spacing starting after base_time."""

    base_time: float
    vectors: np.ndarray            # (horizon, 19) predicted state rows
    stale: bool = False

    def __post_init__(self):
        if len(self.vectors) < 1:
            raise ValueError("predicted trajectory needs at least one state")

    @property
    def horizon_count(self) -> int:
        return len(self.vectors)

    def time_of(self, i: int) -> float:
        return self.base_time + (i + 1) * SAMPLE_DT

    def state_at(self, i: int) -> ObjectState:
        return ObjectState.from_vector(self.vectors[i].astype(np.float64),
                                       self.time_of(i))

    @property
    def states(self) -> list:
        return [self.state_at(i) for i in range(len(self.vectors))]

    def positions(self) -> np.ndarray:
        return self.vectors[:, 0:3]


@dataclass
class PredictorBundle:
    """Trained LSTM plus the fixed feature scales it was trained with."""

    lstm: Lstm
    input_scale: np.ndarray = field(default_factory=lambda: INPUT_SCALE.copy())
    output_scale: np.ndarray = field(default_factory=lambda: OUTPUT_SCALE.copy())
    history: int = HISTORY_LEN

    def __post_init__(self):
        self.input_scale = np.ascontiguousarray(self.input_scale, dtype=F32)
        self.output_scale = np.ascontiguousarray(self.output_scale, dtype=F32)

    def tensors(self) -> dict:
        out = self.lstm.params("lstm/")
        out["input_scale"] = self.input_scale
        out["output_scale"] = self.output_scale
        out["history"] = np.array([self.history], dtype=F32)
        return out

    @staticmethod
    def from_tensors(t: dict) -> "PredictorBundle":
        return PredictorBundle(
            lstm_from_tensors(t, "lstm/"),
            t["input_scale"], t["output_scale"],
            int(round(float(t["history"][0]))))

    def save(self, path: str) -> None:
        save_checkpoint(path, self.tensors())

    @staticmethod
    def load(path: str) -> "PredictorBundle":
        return PredictorBundle.from_tensors(load_checkpoint(path))

    def _kernel_args(self):
        if not hasattr(self, "_kargs"):
            l = self.lstm
            H = l.hidden_size
            # kernel gate layout is [i, f, o, g]: sigmoids become contiguous
            perm = np.concatenate([np.arange(0, 2 * H), np.arange(3 * H, 4 * H),
                                   np.arange(2 * H, 3 * H)])
            self._kargs = (np.ascontiguousarray(l.W[perm].T),
                           np.ascontiguousarray(l.U[perm]),
                           np.ascontiguousarray(l.b[perm]),
                           np.ascontiguousarray(l.fc_W),
                           np.ascontiguousarray(l.fc_b),
                           np.ascontiguousarray(l.head_W),
                           np.ascontiguousarray(l.head_b))
        return self._kargs


def init_predictor(rng: np.random.Generator, hidden: int = 100,
                   fc: int = 100, history: int = HISTORY_LEN) -> PredictorBundle:
    return PredictorBundle(Lstm.init(STATE_DIM, STATE_DIM, rng,
                                     hidden_size=hidden, fc_size=fc),
                           history=history)


def _rollout_vectors(bundle: PredictorBundle, window: np.ndarray,
                     horizon: int) -> np.ndarray:
    win32 = np.ascontiguousarray(window, dtype=F32)
    return lstm_rollout_kernel(*bundle._kernel_args(), win32, horizon,
                               bundle.input_scale, bundle.output_scale)


def predict_next(bundle: PredictorBundle, buffer: HistoryBuffer) -> ObjectState:
    """One-step prediction: residual added to the newest buffered state."""
    window = buffer.window()
    vec = _rollout_vectors(bundle, window, 1)[0]
    return ObjectState.from_vector(vec.astype(np.float64),
                                   buffer.last_time + SAMPLE_DT)


def rollout(bundle: PredictorBundle, buffer: HistoryBuffer,
            horizon: int) -> PredictedTrajectory:
    """Autoregressive rollout; stops early once predicted z drops below 0."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    window = buffer.window()
    vecs = _rollout_vectors(bundle, window, horizon)
    return PredictedTrajectory(buffer.last_time, vecs)


def rollout_core(step_fn, window: np.ndarray, base_time: float,
                 horizon: int) -> PredictedTrajectory:
    """Pure-python rollout over an arbitrary one-step function (oracle
    substitution point for tests)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    work = window.copy()
    rows = []
    for _ in range(horizon):
        vec = step_fn(work)
        rows.append(vec)
        if vec[2] < 0.0:
            break
        work = np.vstack([work[1:], vec])
    return PredictedTrajectory(base_time, np.array(rows))


# ---------------------------------------------------------------------------
# Training

@dataclass
class PredictorTrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 3e-4
    seed: int = 0
    hidden: int = 100
    fc: int = 100
    history: int = HISTORY_LEN
    test_fraction: float = 0.1
    max_test_windows: int = 20000


def _windows_from(trajectories: list, history: int):
    """All (traj_index, start) pairs with valid finite-difference content."""
    out = []
    for ti, traj in enumerate(trajectories):
        last_start = traj.n_samples - history - 1
        for s in range(BURN_IN, last_start + 1):
            out.append((ti, s))
    return out


def _batch_features(trajectories, idx_pairs, bundle: PredictorBundle):
    history = bundle.history
    B = len(idx_pairs)
    X = np.empty((B, history, STATE_DIM), dtype=F32)
    Y = np.empty((B, STATE_DIM), dtype=F32)
    for bi, (ti, s) in enumerate(idx_pairs):
        rows = trajectories[ti].data[s:s + history + 1, 1:]
        X[bi] = rows[:history] / bundle.input_scale
        cur = rows[history - 1]
        nxt = rows[history].copy()
        if np.dot(nxt[3:7], cur[3:7]) < 0.0:  # keep quaternion delta minimal
            nxt[3:7] = -nxt[3:7]
        Y[bi] = (nxt - cur) / bundle.output_scale
    return X, Y


def _eval_mse(trajectories, pairs, bundle, batch_size=512):
    total, n = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        X, Y = _batch_features(trajectories, pairs[i:i + batch_size], bundle)
        pred = lstm_forward(bundle.lstm, X)
        total += float(np.sum((pred - Y) ** 2))
        n += Y.size
    return total / max(n, 1)


def train_predictor(trajectories: list, cfg: PredictorTrainConfig | None = None):
    """Train the one-step residual predictor; returns (bundle, report rows).

    Report rows are (epoch, train_mse, test_mse). Deterministic under
    cfg.seed: the split, shuffling and initialization all derive from it.
    """
    if not trajectories:
        raise ValueError("empty dataset")
    if cfg is None:
        cfg = PredictorTrainConfig()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    bundle = init_predictor(rng, cfg.hidden, cfg.fc, cfg.history)
    perm = rng.permutation(len(trajectories))
    n_test = int(round(cfg.test_fraction * len(trajectories)))
    test_ids = set(perm[:n_test].tolist())
    train_trajs = [t for i, t in enumerate(trajectories) if i not in test_ids]
    test_trajs = [t for i, t in enumerate(trajectories) if i in test_ids]
    train_pairs = _windows_from(train_trajs, cfg.history)
    test_pairs = _windows_from(test_trajs, cfg.history)
    if len(test_pairs) > cfg.max_test_windows:
        sel = rng.choice(len(test_pairs), size=cfg.max_test_windows, replace=False)
        test_pairs = [test_pairs[i] for i in sorted(sel)]
    if not train_pairs:
        raise ValueError("dataset has no trainable windows")
    params = bundle.lstm.params()
    adam = adam_init(params, lr=cfg.lr)
    report = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_pairs))
        running, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_pairs[j] for j in order[i:i + cfg.batch_size]]
            X, Y = _batch_features(train_trajs, batch, bundle)
            pred, cache = lstm_forward_cache(bundle.lstm, X)
            err = pred - Y
            running += float(np.sum(err ** 2))
            seen += err.size
            grads = lstm_backward(bundle.lstm, cache, (2.0 / err.size) * err)
            adam_step(params, grads, adam)
        test_mse = _eval_mse(test_trajs, test_pairs, bundle) if test_pairs else float("nan")
        report.append((epoch, running / seen, test_mse))
    return bundle, report


def report_text(report) -> str:
    lines = ["epoch train_mse test_mse"]
    for epoch, tr, te in report:
        lines.append(f"{epoch} {tr:.8f} {te:.8f}")
    return "\n".join(lines) + "\n"


def feed_trajectory(buffer: HistoryBuffer, traj: Trajectory,
                    up_to_index: int) -> HistoryBuffer:
    """Stream recorded poses into the buffer up to a sample index, inclusive."""
    for i in range(up_to_index + 1):
        row = traj.data[i]
        buffer.update(RigidPose(row[1:4].copy(), quat_normalize(row[4:8])),
                      float(row[0]))
    return buffer


def evaluate_target_errors(bundle: PredictorBundle, trajectories: list,
                           deltas=(0.5, 0.1), t_target: float = 0.6):
    """Mean predicted-position error at the target time for each lead time.

    For each trajectory and each delta, the predictor observes ground-truth
    poses up to t_target - delta and rolls the trajectory out to t_target;
    the error is the distance to the recorded position there.
    """
    tgt_idx = int(round(t_target / SAMPLE_DT))
    errors = {d: [] for d in deltas}
    for traj in trajectories:
        if traj.n_samples <= tgt_idx:
            continue
        for d in deltas:
            obs_idx = tgt_idx - int(round(d / SAMPLE_DT))
            if obs_idx < bundle.history - 1:
                continue
            buf = HistoryBuffer(bundle.history)
            feed_trajectory(buf, traj, obs_idx)
            pred = rollout(bundle, buf, tgt_idx - obs_idx)
            if pred.horizon_count < tgt_idx - obs_idx:
                errors[d].append(float("inf"))
                continue
            p = pred.vectors[-1, 0:3]
            gt = traj.data[tgt_idx, 1:4]
            errors[d].append(float(np.linalg.norm(p - gt)))
    return {d: float(np.mean(v)) for d, v in errors.items() if v}
