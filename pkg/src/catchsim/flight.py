"""Free flight of rigid objects under gravity and linear (Stokes) damping.

Dynamics: dv/dt = g - beta_lin * v, domega/dt = -beta_ang * omega.
The stepper is a trapezoidal (2nd-order, A-stable) update; the closed-form
solution is kept alongside as an independent verification oracle.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    RigidPose,
    normalize,
    quat_from_rotvec,
    quat_identity,
    quat_multiply,
    quat_normalize,
    quat_to_rotvec,
    euler_to_quat,
)

STATE_DIM = 19  # p(3) q(4) v(3) w(3) a(3) aa(3)
SAMPLE_DT = 0.01  # trajectory recording period (100 Hz)

_SHAPE_KINDS = ("sphere", "cylinder", "box")


@dataclass
class ObjectShape:
    """Primitive rigid body: sphere, cylinder (capsule contact) or box.

    dimensions: sphere (radius,); cylinder (radius, length); box half-extents
    (hx, hy, hz). major_axis is the body-frame long axis, absent for spheres.
    """

    kind: str
    dimensions: tuple
    mass: float = 0.3
    major_axis: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in _SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if any(d <= 0 for d in self.dimensions) or self.mass <= 0:
            raise ValueError("dimensions and mass must be positive")
        if self.kind == "sphere" and len(self.dimensions) != 1:
            raise ValueError("sphere takes (radius,)")
        if self.kind == "cylinder" and len(self.dimensions) != 2:
            raise ValueError("cylinder takes (radius, length)")
        if self.kind == "box" and len(self.dimensions) != 3:
            raise ValueError("box takes half extents (hx, hy, hz)")
        if self.major_axis is not None:
            self.major_axis = normalize(np.asarray(self.major_axis, dtype=np.float64))
        elif self.kind == "cylinder":
            self.major_axis = np.array([0.0, 0.0, 1.0])
        elif self.kind == "box":
            i = int(np.argmax(self.dimensions))
            ax = np.zeros(3)
            ax[i] = 1.0
            self.major_axis = ax

    def bottom_clearance(self) -> float:
        """Height of the center above ground when resting on the floor."""
        if self.kind == "sphere":
            return self.dimensions[0]
        if self.kind == "cylinder":
            return self.dimensions[0]
        return min(self.dimensions)

    def body_inertia(self) -> np.ndarray:
        """Diagonal body-frame inertia tensor entries."""
        m = self.mass
        if self.kind == "sphere":
            r = self.dimensions[0]
            i = 0.4 * m * r * r
            return np.array([i, i, i])
        if self.kind == "cylinder":
            r, length = self.dimensions
            ia = 0.5 * m * r * r
            it = m * (3 * r * r + length * length) / 12.0
            return np.array([it, it, ia])
        hx, hy, hz = self.dimensions
        return (m / 3.0) * np.array([hy * hy + hz * hz,
                                     hx * hx + hz * hz,
                                     hx * hx + hy * hy])


@dataclass
class ObjectState:
    """Flying-object state: pose, twist and acceleration at time t."""

    pose: RigidPose
    lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ang_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lin_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ang_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def copy(self) -> "ObjectState":
        return ObjectState(self.pose.copy(), self.lin_vel.copy(),
                           self.ang_vel.copy(), self.lin_acc.copy(),
                           self.ang_acc.copy(), self.t)

    def to_vector(self) -> np.ndarray:
        """Pack the 19 state values (pose, twist, acceleration)."""
        return np.concatenate([self.pose.position, self.pose.orientation,
                               self.lin_vel, self.ang_vel,
                               self.lin_acc, self.ang_acc])

    @staticmethod
    def from_vector(v: np.ndarray, t: float) -> "ObjectState":
        v = np.asarray(v, dtype=np.float64)
        return ObjectState(
            RigidPose(v[0:3].copy(), quat_normalize(v[3:7])),
            v[7:10].copy(), v[10:13].copy(), v[13:16].copy(), v[16:19].copy(), t)


@dataclass
class SimConfig:
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    beta_lin: float = 0.1
    beta_ang: float = 0.1
    dt_physics: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        if not (0.0 < self.dt_physics <= 0.01):
            raise ValueError("dt_physics must be in (0, 0.01]")
        if self.beta_lin < 0 or self.beta_ang < 0:
            raise ValueError("damping coefficients must be >= 0")


@dataclass
class TossRanges:
    """Uniform sampling boxes for object initial conditions."""

    pos_lo: np.ndarray = field(default_factory=lambda: np.array([2.5, -0.6, 0.7]))
    pos_hi: np.ndarray = field(default_factory=lambda: np.array([3.0, -0.4, 0.9]))
    euler_lo: np.ndarray = field(default_factory=lambda: np.array([-np.pi / 4, -np.pi, -np.pi / 4]))
    euler_hi: np.ndarray = field(default_factory=lambda: np.array([np.pi / 4, np.pi, np.pi / 4]))
    linvel_lo: np.ndarray = field(default_factory=lambda: np.array([-5.0, 0.0, 2.5]))
    linvel_hi: np.ndarray = field(default_factory=lambda: np.array([-4.0, 0.0, 3.5]))
    angvel_lo: np.ndarray = field(default_factory=lambda: np.array([-2.0, -10.0, 0.0]))
    angvel_hi: np.ndarray = field(default_factory=lambda: np.array([2.0, 10.0, 0.0]))

    def __post_init__(self):
        for name in ("pos", "euler", "linvel", "angvel"):
            lo = np.asarray(getattr(self, name + "_lo"), dtype=np.float64)
            hi = np.asarray(getattr(self, name + "_hi"), dtype=np.float64)
            setattr(self, name + "_lo", lo)
            setattr(self, name + "_hi", hi)
            if np.any(lo > hi):
                raise ValueError(f"{name} range has lo > hi")


def training_shapes() -> list[ObjectShape]:
    """The four training objects: three cylinders and a ball."""
    return [
        ObjectShape("cylinder", (0.030, 0.20), name="cylinder0"),
        ObjectShape("cylinder", (0.040, 0.24), name="cylinder1"),
        ObjectShape("cylinder", (0.025, 0.16), name="cylinder2"),
        ObjectShape("sphere", (0.035,), name="ball"),
    ]


def _damped_step(p, v, q, w, gravity, beta_lin, beta_ang, dt,
                 extra_acc=None, extra_angacc=None):
    """One trapezoidal update of the damped ballistic ODE.

    Optional extra accelerations (contact forces) are treated explicitly.
    Returns (p', v', q', w').
    """
    hl = 0.5 * beta_lin * dt
    ha = 0.5 * beta_ang * dt
    acc0 = gravity if extra_acc is None else gravity + extra_acc
    v_new = (v * (1.0 - hl) + acc0 * dt) / (1.0 + hl)
    p_new = p + 0.5 * dt * (v + v_new)
    aa0 = extra_angacc
    if aa0 is None:
        w_new = w * ((1.0 - ha) / (1.0 + ha))
    else:
        w_new = (w * (1.0 - ha) + aa0 * dt) / (1.0 + ha)
    q_new = quat_normalize(
        quat_multiply(quat_from_rotvec(0.5 * dt * (w + w_new)), q))
    return p_new, v_new, q_new, w_new


def step(state: ObjectState, cfg: SimConfig) -> ObjectState:
    """Advance a free-flying object by cfg.dt_physics."""
    dt = cfg.dt_physics
    p, v, q, w = _damped_step(state.pose.position, state.lin_vel,
                              state.pose.orientation, state.ang_vel,
                              cfg.gravity, cfg.beta_lin, cfg.beta_ang, dt)
    return ObjectState(
        RigidPose(p, q), v, w,
        cfg.gravity - cfg.beta_lin * v, -cfg.beta_ang * w,
        state.t + dt)


def analytic_state(initial: ObjectState, cfg: SimConfig, t: float) -> ObjectState:
    """Closed-form damped-ballistic state a time t after `initial`.

    v(t) = g/b + (v0 - g/b) e^{-bt};  p(t) = p0 + (g/b) t + (v0 - g/b)(1 - e^{-bt})/b
    with the b -> 0 limits handled exactly. The angular velocity direction is
    constant, so orientation reduces to a single rotation about that axis by
    the integral of |omega(t)|.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    g = cfg.gravity
    b = cfg.beta_lin
    v0 = initial.lin_vel
    p0 = initial.pose.position
    if t == 0.0:
        out = initial.copy()
        out.lin_acc = g - b * v0
        out.ang_acc = -cfg.beta_ang * initial.ang_vel
        return out
    if b == 0.0:
        v = v0 + g * t
        p = p0 + v0 * t + 0.5 * g * t * t
    else:
        decay = math.exp(-b * t)
        ramp = -math.expm1(-b * t) / b  # (1 - e^{-bt}) / b, stable for tiny b
        v = g / b + (v0 - g / b) * decay
        p = p0 + (g / b) * t + (v0 - g / b) * ramp
    ba = cfg.beta_ang
    w0 = initial.ang_vel
    wn = float(np.linalg.norm(w0))
    if ba == 0.0:
        w = w0.copy()
        angle = wn * t
    else:
        w = w0 * math.exp(-ba * t)
        angle = wn * (-math.expm1(-ba * t) / ba)
    if wn > 0.0:
        dq = quat_from_rotvec((angle / wn) * w0)
        q = quat_normalize(quat_multiply(dq, initial.pose.orientation))
    else:
        q = initial.pose.orientation.copy()
    return ObjectState(RigidPose(p, q), v, w,
                       g - b * v, -ba * w, initial.t + t)


def sample_toss(rng: np.random.Generator, ranges: TossRanges,
                cfg: SimConfig | None = None) -> ObjectState:
    """Uniform draw of an initial object state from the toss ranges."""
    pos = rng.uniform(ranges.pos_lo, ranges.pos_hi)
    euler = rng.uniform(ranges.euler_lo, ranges.euler_hi)
    lin_vel = rng.uniform(ranges.linvel_lo, ranges.linvel_hi)
    ang_vel = rng.uniform(ranges.angvel_lo, ranges.angvel_hi)
    if cfg is not None:
        lin_acc = cfg.gravity - cfg.beta_lin * lin_vel
        ang_acc = -cfg.beta_ang * ang_vel
    else:
        lin_acc = np.zeros(3)
        ang_acc = np.zeros(3)
    return ObjectState(RigidPose(pos, euler_to_quat(euler)),
                       lin_vel, ang_vel, lin_acc, ang_acc, 0.0)


def apply_perturbation(state: ObjectState, direction: np.ndarray,
                       magnitude: float) -> ObjectState:
    """Add a velocity kick of `magnitude` along `direction` (normalized)."""
    d = np.asarray(direction, dtype=np.float64)
    n = float(np.linalg.norm(d))
    if n == 0.0:
        raise ValueError("perturbation direction must be nonzero")
    out = state.copy()
    out.lin_vel = out.lin_vel + (magnitude / n) * d
    return out


@dataclass
class Trajectory:
    """Recorded flight: one shape plus samples at fixed 0.01 s spacing.

    data rows are [t, p(3), q(4), v(3), w(3), a(3), aa(3)].
    """

    shape: ObjectShape
    data: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    def sample(self, i: int) -> ObjectState:
        row = self.data[i]
        return ObjectState.from_vector(row[1:], float(row[0]))

    @property
    def samples(self) -> list[ObjectState]:
        return [self.sample(i) for i in range(self.n_samples)]

    @property
    def duration(self) -> float:
        return float(self.data[-1, 0] - self.data[0, 0])


def differentiate_pose_rows(times: np.ndarray, positions: np.ndarray,
                            quats: np.ndarray):
    """Finite-difference twists/accelerations from a pose sequence.

    Matches the online observation pipeline: second-order backward difference
    for linear velocity (first-order at index 1, zero at 0), first-order
    backward quaternion-log difference for angular velocity, and backward
    differences of those for the accelerations. The first BURN_IN rows carry
    placeholder derivatives.
    """
    n = len(times)
    v = np.zeros((n, 3))
    w = np.zeros((n, 3))
    a = np.zeros((n, 3))
    aa = np.zeros((n, 3))
    for i in range(1, n):
        dt = times[i] - times[i - 1]
        if i >= 2:
            v[i] = (3.0 * positions[i] - 4.0 * positions[i - 1]
                    + positions[i - 2]) / (2.0 * dt)
        else:
            v[i] = (positions[i] - positions[i - 1]) / dt
        dq = quat_multiply(quats[i], np.array([quats[i - 1][0], -quats[i - 1][1],
                                               -quats[i - 1][2], -quats[i - 1][3]]))
        w[i] = quat_to_rotvec(quat_normalize(dq)) / dt
    for i in range(2, n):
        dt = times[i] - times[i - 1]
        a[i] = (v[i] - v[i - 1]) / dt
        aa[i] = (w[i] - w[i - 1]) / dt
    return v, w, a, aa


BURN_IN = 3  # leading samples with unreliable finite-difference derivatives


def simulate_trajectory(initial: ObjectState, shape: ObjectShape,
                        cfg: SimConfig, duration: float,
                        differentiate: bool = True) -> Trajectory:
    """Integrate a toss, recording samples at 100 Hz until duration or ground.

    With differentiate=True velocities/accelerations in the samples are
    replaced by the finite-difference estimates a downstream observer would
    compute from the recorded poses.
    """
    record_every = round(SAMPLE_DT / cfg.dt_physics)
    if abs(record_every * cfg.dt_physics - SAMPLE_DT) > 1e-9:
        raise ValueError("dt_physics must divide the 0.01 s sample period")
    n_records = int(round(duration / SAMPLE_DT))
    dt = cfg.dt_physics
    g = cfg.gravity
    p = initial.pose.position.copy()
    v = initial.lin_vel.copy()
    q = initial.pose.orientation.copy()
    w = initial.ang_vel.copy()
    t = initial.t
    rows = [np.concatenate([[t], p, q, v, w, g - cfg.beta_lin * v,
                            -cfg.beta_ang * w])]
    for k in range(n_records):
        for _ in range(record_every):
            p, v, q, w = _damped_step(p, v, q, w, g, cfg.beta_lin,
                                      cfg.beta_ang, dt)
        t = initial.t + (k + 1) * SAMPLE_DT
        if p[2] < 0.0:
            break  # hit the ground: object dropped
        rows.append(np.concatenate([[t], p, q, v, w, g - cfg.beta_lin * v,
                                    -cfg.beta_ang * w]))
    data = np.array(rows)
    if differentiate:
        vels, omegas, accs, aaccs = differentiate_pose_rows(
            data[:, 0], data[:, 1:4], data[:, 4:8])
        data[:, 8:11] = vels
        data[:, 11:14] = omegas
        data[:, 14:17] = accs
        data[:, 17:20] = aaccs
    return Trajectory(shape, data)


def generate_dataset(count: int, cfg: SimConfig, ranges: TossRanges,
                     duration: float,
                     shapes: list[ObjectShape] | None = None) -> list[Trajectory]:
    """Generate `count` random tosses recorded at 100 Hz.

    Per-trajectory RNG streams are derived from (cfg.seed, index), so the
    dataset is reproducible and order-independent.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if shapes is None:
        shapes = training_shapes()
    children = np.random.SeedSequence(cfg.seed).spawn(count)
    out = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(children[i]))
        shape = shapes[int(rng.integers(len(shapes)))]
        toss = sample_toss(rng, ranges, cfg)
        out.append(simulate_trajectory(toss, shape, cfg, duration))
    return out


def split_dataset(trajectories: list[Trajectory], test_fraction: float = 0.1,
                  seed: int = 0):
    """Deterministic train/test split by trajectory."""
    idx = np.random.Generator(np.random.PCG64(seed)).permutation(len(trajectories))
    n_test = int(round(test_fraction * len(trajectories)))
    test_ids = set(idx[:n_test].tolist())
    train = [t for i, t in enumerate(trajectories) if i not in test_ids]
    test = [t for i, t in enumerate(trajectories) if i in test_ids]
    return train, test


# ---------------------------------------------------------------------------
# CTRJ trajectory container (versioned binary, little-endian)

TRAJ_MAGIC = b"CTRJ"
TRAJ_VERSION = 1


class DatasetFormatError(Exception):
    pass


def _pack_shape(shape: ObjectShape) -> bytes:
    kind = _SHAPE_KINDS.index(shape.kind)
    buf = struct.pack("<Bd", kind, shape.mass)
    buf += struct.pack("<B", len(shape.dimensions))
    buf += struct.pack(f"<{len(shape.dimensions)}d", *shape.dimensions)
    if shape.major_axis is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<B3d", 1, *shape.major_axis)
    name_b = shape.name.encode("utf-8")
    buf += struct.pack("<H", len(name_b)) + name_b
    return buf


def _unpack_shape(f) -> ObjectShape:
    kind, mass = struct.unpack("<Bd", _read_exact(f, 9))
    (nd,) = struct.unpack("<B", _read_exact(f, 1))
    dims = struct.unpack(f"<{nd}d", _read_exact(f, 8 * nd))
    (has_axis,) = struct.unpack("<B", _read_exact(f, 1))
    axis = None
    if has_axis:
        axis = np.array(struct.unpack("<3d", _read_exact(f, 24)))
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    return ObjectShape(_SHAPE_KINDS[kind], dims, mass, axis, name)


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise DatasetFormatError("truncated dataset file")
    return b


def save_dataset(path: str, trajectories: list[Trajectory], cfg: SimConfig,
                 duration: float) -> None:
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC)
        f.write(struct.pack("<H", TRAJ_VERSION))
        f.write(struct.pack("<Id", len(trajectories), duration))
        f.write(struct.pack("<3dddd", *cfg.gravity, cfg.beta_lin,
                            cfg.beta_ang, cfg.dt_physics))
        f.write(struct.pack("<Q", cfg.seed))
        for traj in trajectories:
            f.write(_pack_shape(traj.shape))
            f.write(struct.pack("<I", traj.n_samples))
            f.write(np.ascontiguousarray(traj.data, dtype="<f8").tobytes())


def load_dataset(path: str):
    """Load a CTRJ file; returns (trajectories, cfg, duration)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TRAJ_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version != TRAJ_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        count, duration = struct.unpack("<Id", _read_exact(f, 12))
        g = struct.unpack("<3d", _read_exact(f, 24))
        beta_lin, beta_ang, dtp = struct.unpack("<3d", _read_exact(f, 24))
        (seed,) = struct.unpack("<Q", _read_exact(f, 8))
        cfg = SimConfig(np.array(g), beta_lin, beta_ang, dtp, seed)
        out = []
        for _ in range(count):
            shape = _unpack_shape(f)
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            raw = _read_exact(f, n * 20 * 8)
            data = np.frombuffer(raw, dtype="<f8").reshape(n, 20).copy()
            out.append(Trajectory(shape, data))
    return out, cfg, duration


def export_dataset_text(trajectories: list[Trajectory], out: io.TextIOBase) -> None:
    """Plain-text dump for debugging: one sample per line."""
    out.write("# traj t px py pz qw qx qy qz vx vy vz wx wy wz"
              " ax ay az aax aay aaz\n")
    for i, traj in enumerate(trajectories):
        out.write(f"# shape {i}: {traj.shape.kind} dims={traj.shape.dimensions}"
                  f" mass={traj.shape.mass} name={traj.shape.name}\n")
        for row in traj.data:
            out.write(str(i) + " " + " ".join(f"{x:.9g}" for x in row) + "\n")
