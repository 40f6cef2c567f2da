"""Score identities, collection counting, selection argmax, training."""

import io
import math

import numpy as np
import pytest

from catchsim.flight import SimConfig
from catchsim.geometry import RigidPose, quat_identity, quat_normalize, quat_rotate
from catchsim.policies import make_policy, reach_action_bounds, REACH_OBS_DIM
from catchsim.predictor import PredictedTrajectory
from catchsim.quality import (
    PoseTupleSample,
    QualityCollectConfig,
    QualityDataset,
    QualityFormatError,
    QualityNet,
    QualityTrainConfig,
    collect_dataset,
    export_quality_text,
    init_quality,
    load_quality_dataset,
    save_quality_dataset,
    score,
    select_target,
    train_quality,
)
from catchsim.robot import default_robot

MODEL = default_robot()


def small_reach_policy(seed=0):
    lo, hi = reach_action_bounds()
    return make_policy(REACH_OBS_DIM, lo, hi, np.random.default_rng(seed),
                       hidden=(8,))


class TestScore:
    def test_maximum(self):
        J = np.zeros(7)
        p = np.array([0.5, 0, 1.0])
        v = np.array([-3.0, 0, -1.0])
        u_n = -v / np.linalg.norm(v)
        assert abs(score(J, J, p, p, u_n, v) - 2.0) < 1e-12

    def test_aligned_palm_zero(self):
        J = np.zeros(7)
        p = np.array([0.5, 0, 1.0])
        v = np.array([-3.0, 0, -1.0])
        u_n = v / np.linalg.norm(v)
        assert abs(score(J, np.ones(7), p, p + 1.0, u_n, v)) < 1e-12

    def test_ln2_case(self):
        # both exponential factors 1/2, orthogonal palm: 0.5 * 0.5 * 1 = 0.25
        J_now = np.zeros(7)
        J_d = np.zeros(7)
        J_d[0] = math.log(2.0)
        p_o = np.zeros(3)
        p_d = np.array([math.log(2.0), 0, 0])
        v = np.array([0, 1.0, 0])
        u_n = np.array([0, 0, 1.0])
        assert abs(score(J_d, J_now, p_d, p_o, u_n, v) - 0.25) < 1e-12

    def test_rotation_invariance_of_alignment(self):
        rng = np.random.default_rng(0)
        J = rng.normal(size=7)
        p = rng.normal(size=3)
        for _ in range(100):
            u_n = rng.normal(size=3)
            u_n /= np.linalg.norm(u_n)
            v = rng.normal(size=3)
            q = quat_normalize(rng.normal(size=4))
            s1 = score(J, J, p, p, u_n, v)
            s2 = score(J, J, p, p, quat_rotate(q, u_n), quat_rotate(q, v))
            assert abs(s1 - s2) < 1e-9

    def test_strictly_decreasing_in_distances(self):
        p_o = np.zeros(3)
        v = np.array([1.0, 0, 0])
        u_n = np.array([0, 0, 1.0])
        J_now = np.zeros(7)
        prev = None
        for d in np.linspace(0, 2, 10):
            J_d = np.zeros(7)
            J_d[1] = d
            s = score(J_d, J_now, np.zeros(3), p_o, u_n, v)
            if prev is not None:
                assert s < prev
            prev = s
        prev = None
        for d in np.linspace(0, 2, 10):
            s = score(J_now, J_now, np.array([d, 0, 0]), p_o, u_n, v)
            if prev is not None:
                assert s < prev
            prev = s

    def test_velocity_scale_invariance(self):
        rng = np.random.default_rng(1)
        J = rng.normal(size=7)
        u_n = np.array([0, 0, 1.0])
        v = rng.normal(size=3)
        s1 = score(J, J, np.zeros(3), np.zeros(3), u_n, v)
        s2 = score(J, J, np.zeros(3), np.zeros(3), u_n, 7.3 * v)
        assert abs(s1 - s2) < 1e-12

    def test_range_over_random_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(2000):
            s = score(rng.normal(size=7), rng.normal(size=7),
                      rng.normal(size=3), rng.normal(size=3),
                      quat_rotate(quat_normalize(rng.normal(size=4)),
                                  np.array([0, 0, 1.0])),
                      rng.normal(size=3) + 1e-3)
            assert 0.0 <= s <= 2.0

    def test_zero_velocity_rejected(self):
        with pytest.raises(ValueError):
            score(np.zeros(7), np.zeros(7), np.zeros(3), np.zeros(3),
                  np.array([0, 0, 1.0]), np.zeros(3))


class TestCollection:
    def test_single_tuple(self):
        ds = collect_dataset(1, 1, 1, MODEL, small_reach_policy(),
                             QualityCollectConfig(seed=3, settle_time=0.1))
        assert len(ds) + ds.skipped == 1
        for s in ds.samples:
            assert 0.0 <= s.score <= 2.0

    def test_counting_and_range(self):
        ds = collect_dataset(2, 3, 2, MODEL, small_reach_policy(),
                             QualityCollectConfig(seed=4, settle_time=0.1))
        assert len(ds) + ds.skipped == 12
        assert len(ds) > 0
        for s in ds.samples:
            assert 0.0 <= s.score <= 2.0
            assert abs(np.linalg.norm(s.hand_pose.orientation) - 1) < 1e-9

    def test_deterministic(self):
        cfg = QualityCollectConfig(seed=5, settle_time=0.1)
        a = collect_dataset(1, 2, 2, MODEL, small_reach_policy(), cfg)
        b = collect_dataset(1, 2, 2, MODEL, small_reach_policy(), cfg)
        assert len(a) == len(b)
        for sa, sb in zip(a.samples, b.samples):
            assert np.array_equal(sa.row(), sb.row())


class TestDatasetFile:
    def _dataset(self):
        rng = np.random.default_rng(6)
        samples = []
        for _ in range(5):
            samples.append(PoseTupleSample(
                RigidPose(rng.normal(size=3), quat_normalize(rng.normal(size=4))),
                RigidPose(rng.normal(size=3), quat_normalize(rng.normal(size=4))),
                rng.normal(size=3), rng.normal(size=7), rng.normal(size=7),
                rng.normal(size=3), float(rng.uniform(0, 2))))
        return QualityDataset(samples, 5, 1, 1, seed=9, skipped=2)

    def test_round_trip(self, tmp_path):
        ds = self._dataset()
        path = str(tmp_path / "q.cpqd")
        save_quality_dataset(path, ds)
        loaded = load_quality_dataset(path)
        assert loaded.n_trajectories == 5 and loaded.skipped == 2
        for a, b in zip(ds.samples, loaded.samples):
            assert np.allclose(a.row(), b.row())

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(QualityFormatError):
            load_quality_dataset(str(p))

    def test_text_export(self):
        ds = self._dataset()
        buf = io.StringIO()
        export_quality_text(ds, buf)
        lines = [l for l in buf.getvalue().splitlines() if not l.startswith("#")]
        assert len(lines) == 5
        assert len(lines[0].split()) == 35


def random_predicted(rng, horizon=40):
    vecs = rng.normal(size=(horizon, 19))
    for row in vecs:
        row[3:7] = quat_normalize(row[3:7])
        row[2] = abs(row[2]) + 0.1
    return PredictedTrajectory(0.1, vecs.astype(np.float32))


class TestSelectTarget:
    def test_single_pose(self):
        net = init_quality(np.random.default_rng(7))
        pred = random_predicted(np.random.default_rng(8), horizon=1)
        sel = select_target(net, pred, RigidPose(np.zeros(3), quat_identity()))
        assert sel.index == 0

    def test_brute_force_argmax(self):
        rng = np.random.default_rng(9)
        net = init_quality(rng)
        hand = RigidPose(np.array([0.5, -0.3, 0.9]), quat_identity())
        for _ in range(100):
            pred = random_predicted(rng, horizon=int(rng.integers(1, 80)))
            sel = select_target(net, pred, hand)
            scores = net.score_pairs(pred.vectors[:, 0:7], hand)
            assert sel.index == int(np.argmax(scores))
            assert sel.score == float(scores[sel.index])

    def test_nearest_pose_wins_for_distance_scoring_net(self):
        # a hand-crafted linear net that scores by negative x distance
        rng = np.random.default_rng(10)
        net = init_quality(rng, hidden=(4,))
        hand = RigidPose(np.zeros(3), quat_identity())
        vecs = np.zeros((10, 19), dtype=np.float32)
        vecs[:, 3] = 1.0
        vecs[:, 0] = np.linspace(0.1, 2.0, 10)  # increasing distance in +x
        vecs[:, 2] = 1.0
        pred = PredictedTrajectory(0.0, vecs)
        scores = net.score_pairs(pred.vectors[:, 0:7], hand)
        sel = select_target(net, pred, hand)
        assert sel.index == int(np.argmax(scores))

    def test_tie_breaks_earliest(self):
        # zero-weight net scores every pose identically: earliest must win
        net = init_quality(np.random.default_rng(11))
        for w in net.mlp.weights:
            w[...] = 0
        rng = np.random.default_rng(17)
        pred = random_predicted(rng, horizon=12)
        sel = select_target(net, pred, RigidPose(np.zeros(3), quat_identity()))
        assert sel.index == 0

    def test_infeasible_flag(self):
        rng = np.random.default_rng(12)
        net = init_quality(rng)
        pred = random_predicted(rng)
        hand = RigidPose(np.zeros(3), quat_identity())
        sel = select_target(net, pred, hand, s_min=2.1)  # above max range
        assert not sel.feasible


class TestTraining:
    def _synthetic_dataset(self, n=600, seed=13):
        # scores correlated with hand-object distance: learnable from poses
        rng = np.random.default_rng(seed)
        samples = []
        for _ in range(n):
            obj = RigidPose(rng.uniform([-1, -1, 0.2], [1, 1, 1.5]),
                            quat_normalize(rng.normal(size=4)))
            hand = RigidPose(obj.position + rng.normal(scale=0.4, size=3),
                             quat_normalize(rng.normal(size=4)))
            d = np.linalg.norm(obj.position - hand.position)
            s = 2.0 * math.exp(-2.0 * d)
            samples.append(PoseTupleSample(obj, hand, rng.normal(size=3),
                                           np.zeros(7), np.zeros(7),
                                           hand.position, s))
        return QualityDataset(samples, n, 1, 1, seed)

    def test_training_decreases_and_bounded_outputs(self):
        ds = self._synthetic_dataset()
        net, report = train_quality(ds, QualityTrainConfig(epochs=15, seed=1))
        assert report[-1][1] < report[0][1]
        rng = np.random.default_rng(14)
        x = rng.normal(size=(50, 14)).astype(np.float32)
        from catchsim.nn import mlp_forward
        y = mlp_forward(net.mlp, x)
        assert np.all(y > 0.0) and np.all(y < 2.0)

    def test_undersized_dataset_rejected(self):
        ds = self._synthetic_dataset(n=50)
        with pytest.raises(ValueError):
            train_quality(ds)

    def test_deterministic(self):
        ds = self._synthetic_dataset(n=200)
        cfg = QualityTrainConfig(epochs=3, seed=5)
        _, r1 = train_quality(ds, cfg)
        _, r2 = train_quality(ds, cfg)
        assert r1 == r2

    def test_checkpoint_round_trip(self, tmp_path):
        net = init_quality(np.random.default_rng(15))
        path = str(tmp_path / "qnet.ckpt")
        net.save(path)
        loaded = QualityNet.load(path)
        rng = np.random.default_rng(16)
        pred = random_predicted(rng)
        hand = RigidPose(np.zeros(3), quat_identity())
        a = net.score_pairs(pred.vectors[:, 0:7], hand)
        b = loaded.score_pairs(pred.vectors[:, 0:7], hand)
        assert np.array_equal(a, b)
