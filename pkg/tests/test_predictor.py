"""History differentiation, residual prediction, rollout, small training."""

import time

import numpy as np
import pytest

from catchsim.flight import (
    SAMPLE_DT,
    ObjectState,
    SimConfig,
    TossRanges,
    analytic_state,
    generate_dataset,
    sample_toss,
    simulate_trajectory,
    training_shapes,
)
from catchsim.geometry import RigidPose, quat_identity
from catchsim.nn import Lstm
from catchsim.predictor import (
    HISTORY_LEN,
    HistoryBuffer,
    PredictorBundle,
    PredictorTrainConfig,
    evaluate_target_errors,
    feed_trajectory,
    init_predictor,
    predict_next,
    rollout,
    rollout_core,
    train_predictor,
    update_history,
)


def zero_predictor(history=HISTORY_LEN):
    """Residual network with all-zero parameters: predicts no change."""
    H, D = 8, 19
    lstm = Lstm(D, H, np.zeros((4 * H, D), np.float32),
                np.zeros((4 * H, H), np.float32), np.zeros(4 * H, np.float32),
                np.zeros((8, H), np.float32), np.zeros(8, np.float32),
                np.zeros((D, 8), np.float32), np.zeros(D, np.float32))
    return PredictorBundle(lstm, history=history)


class TestHistoryBuffer:
    def test_static_object_zero_derivatives(self):
        buf = HistoryBuffer(5)
        pose = RigidPose(np.array([1.0, 2.0, 3.0]), quat_identity())
        for i in range(3):
            update_history(buf, pose, i * SAMPLE_DT)
        for vec in buf.states:
            assert np.allclose(vec[7:], 0.0)

    def test_linear_motion_velocity_exact(self):
        buf = HistoryBuffer(5)
        v = np.array([0.5, -1.0, 2.0])
        for i in range(5):
            t = i * SAMPLE_DT
            update_history(buf, RigidPose(v * t, quat_identity()), t)
        for vec in list(buf.states)[1:]:
            assert np.allclose(vec[7:10], v, atol=1e-9)

    def test_non_monotone_rejected(self):
        buf = HistoryBuffer(5)
        update_history(buf, RigidPose(np.zeros(3), quat_identity()), 0.0)
        with pytest.raises(ValueError):
            update_history(buf, RigidPose(np.zeros(3), quat_identity()), 0.0)

    def test_differentiated_velocity_tracks_analytic(self):
        cfg = SimConfig(beta_lin=0.1, beta_ang=0.1)
        s0 = ObjectState(RigidPose(np.array([2.75, -0.5, 0.8]), quat_identity()),
                         np.array([-4.5, 0.0, 3.0]), np.array([1.0, 6.0, 0.0]))
        buf = HistoryBuffer(40)
        for i in range(40):
            t = i * SAMPLE_DT
            ref = analytic_state(s0, cfg, t)
            update_history(buf, ref.pose, t)
        states = list(buf.states)
        times = list(buf.times)
        for i in range(3, 40):
            ref = analytic_state(s0, cfg, times[i])
            assert np.linalg.norm(states[i][7:10] - ref.lin_vel) < 0.05

    def test_capacity_ring(self):
        buf = HistoryBuffer(4)
        for i in range(9):
            update_history(buf, RigidPose(np.array([float(i), 0, 0]),
                                          quat_identity()), i * SAMPLE_DT)
        assert len(buf.states) == 4
        assert buf.last_time == 8 * SAMPLE_DT


class TestPredictNext:
    def _full_buffer(self, cfg=None):
        cfg = cfg or SimConfig()
        s0 = ObjectState(RigidPose(np.array([2.75, -0.5, 0.8]), quat_identity()),
                         np.array([-4.5, 0.0, 3.0]), np.array([0.5, 4.0, 0.0]))
        buf = HistoryBuffer(HISTORY_LEN)
        for i in range(HISTORY_LEN):
            t = i * SAMPLE_DT
            update_history(buf, analytic_state(s0, cfg, t).pose, t)
        return buf

    def test_zero_network_is_identity(self):
        buf = self._full_buffer()
        pred = predict_next(zero_predictor(), buf)
        assert np.allclose(pred.to_vector(), buf.states[-1], atol=1e-7)
        assert abs(pred.t - (buf.last_time + SAMPLE_DT)) < 1e-12

    def test_underfull_buffer_rejected(self):
        buf = HistoryBuffer(HISTORY_LEN)
        update_history(buf, RigidPose(np.zeros(3), quat_identity()), 0.0)
        with pytest.raises(ValueError):
            predict_next(zero_predictor(), buf)

    def test_prediction_quaternion_unit(self):
        rng = np.random.default_rng(0)
        bundle = init_predictor(rng, hidden=16, fc=16)
        buf = self._full_buffer()
        for _ in range(5):
            pred = predict_next(bundle, buf)
            assert abs(np.linalg.norm(pred.pose.orientation) - 1.0) < 1e-9


class TestRollout:
    def test_horizon_one_equals_predict_next(self):
        rng = np.random.default_rng(1)
        bundle = init_predictor(rng, hidden=16, fc=16)
        buf = TestPredictNext()._full_buffer()
        one = rollout(bundle, buf, 1)
        single = predict_next(bundle, buf)
        assert np.array_equal(one.state_at(0).to_vector(), single.to_vector())
        assert abs(one.time_of(0) - single.t) < 1e-12

    def test_oracle_substitution_reproduces_analytic(self):
        # a perfect one-step function in place of the network
        cfg = SimConfig(beta_lin=0.1, beta_ang=0.1)
        s0 = ObjectState(RigidPose(np.array([2.75, -0.5, 2.0]), quat_identity()),
                         np.array([-4.5, 0.0, 3.0]), np.array([0.0, 5.0, 0.0]))

        def perfect_step(window):
            cur = ObjectState.from_vector(window[-1], 0.0)
            return analytic_state(cur, cfg, SAMPLE_DT).to_vector()

        window = np.array([analytic_state(s0, cfg, i * SAMPLE_DT).to_vector()
                           for i in range(HISTORY_LEN)])
        base_t = (HISTORY_LEN - 1) * SAMPLE_DT
        pred = rollout_core(perfect_step, window, base_t, 30)
        for k, st in enumerate(pred.states):
            ref = analytic_state(s0, cfg, base_t + (k + 1) * SAMPLE_DT)
            assert np.linalg.norm(st.pose.position - ref.pose.position) < 1e-6

    def test_ground_stop(self):
        def falling(window):
            vec = window[-1].copy()
            vec[2] -= 0.5
            return vec

        window = np.zeros((HISTORY_LEN, 19))
        window[:, 2] = 1.0
        window[:, 3] = 1.0  # unit quaternion w
        pred = rollout_core(falling, window, 0.0, 50)
        assert pred.horizon_count == 3  # 0.5, 0.0 -> next below ground stops
        assert pred.vectors[-1, 2] < 0

    def test_kernel_ground_stop(self):
        buf = TestPredictNext()._full_buffer()
        bundle = init_predictor(np.random.default_rng(3), hidden=16, fc=16)
        pred = rollout(bundle, buf, 200)
        # default toss falls below ground well before 2 s of lookahead
        assert pred.horizon_count < 200
        assert pred.vectors[-1, 2] < 0

    def test_runtime_budget(self):
        rng = np.random.default_rng(2)
        bundle = init_predictor(rng)  # full 100-unit model
        buf = TestPredictNext()._full_buffer()
        for vec in buf.states:  # keep it airborne for the full horizon
            vec[2] += 100.0
        rollout(bundle, buf, 5)  # warm the compiled kernel
        # best of five shots: wall-clock noise on shared machines must not
        # obscure the actual compute cost
        best = float("inf")
        for _ in range(5):
            t0 = time.perf_counter()
            predict_next(bundle, buf)
            pred = rollout(bundle, buf, 100)
            best = min(best, time.perf_counter() - t0)
        assert pred.horizon_count == 100
        assert best < 0.010, f"predict+rollout took {best*1e3:.2f} ms"


class TestTraining:
    def test_loss_decreases_and_no_gross_overfit(self):
        cfg = SimConfig(seed=3)
        ds = generate_dataset(60, cfg, TossRanges(), 0.6)
        tcfg = PredictorTrainConfig(epochs=5, seed=1, hidden=24, fc=24)
        bundle, report = train_predictor(ds, tcfg)
        first, last = report[0][1], report[-1][1]
        assert last < first, f"train mse {first} -> {last}"
        assert report[-1][2] < 2.0 * report[-1][1] + 1e-6

    def test_deterministic_rerun(self):
        cfg = SimConfig(seed=4)
        ds = generate_dataset(12, cfg, TossRanges(), 0.4)
        tcfg = PredictorTrainConfig(epochs=2, seed=7, hidden=12, fc=12)
        _, r1 = train_predictor(ds, tcfg)
        _, r2 = train_predictor(ds, tcfg)
        assert r1 == r2

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_predictor([])

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        bundle = init_predictor(rng, hidden=12, fc=12)
        path = str(tmp_path / "pred.ckpt")
        bundle.save(path)
        loaded = PredictorBundle.load(path)
        buf = TestPredictNext()._full_buffer()
        a = predict_next(bundle, buf)
        b = predict_next(loaded, buf)
        assert np.array_equal(a.to_vector(), b.to_vector())
        assert loaded.history == bundle.history


def test_evaluate_target_errors_smaller_leads_win_for_perfect_model():
    # with decent training, 0.1 s-to-target must beat 0.5 s-to-target;
    # here we only exercise the evaluation plumbing with a small model
    cfg = SimConfig(seed=6)
    ds = generate_dataset(40, cfg, TossRanges(), 0.7)
    tcfg = PredictorTrainConfig(epochs=4, seed=2, hidden=24, fc=24)
    bundle, _ = train_predictor(ds, tcfg)
    errs = evaluate_target_errors(bundle, ds[:20], deltas=(0.5, 0.1), t_target=0.6)
    assert 0.5 in errs and 0.1 in errs
    assert np.isfinite(errs[0.1])
