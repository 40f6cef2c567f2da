"""GAE oracles, surrogate-gradient checks, and toy-task training."""

import numpy as np
import pytest

from catchsim.envs import PointMassEnv
from catchsim.nn import adam_init, mlp_forward_cache
from catchsim.policies import make_policy, policy_act, policy_value
from catchsim.ppo import (
    PpoConfig,
    PpoNanError,
    RolloutBatch,
    collect_rollout,
    compute_gae,
    curve_text,
    ppo_update,
    train_policy,
)


def brute_force_gae(rewards, values, dones, gamma, lam, bootstrap):
    """Direct sum of (gamma*lam)^l * delta_{t+l} up to each episode end."""
    n = len(rewards)
    ext_v = list(values) + [bootstrap]
    deltas = []
    for t in range(n):
        nxt = 0.0 if dones[t] else ext_v[t + 1]
        deltas.append(rewards[t] + gamma * nxt - values[t])
    adv = np.zeros(n)
    for t in range(n):
        acc, w = 0.0, 1.0
        for l in range(t, n):
            acc += w * deltas[l]
            if dones[l]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


class TestGae:
    def test_gamma_zero_one_step(self):
        r = np.array([1.0, 2.0, 3.0])
        v = np.array([0.5, 0.5, 0.5])
        adv, ret = compute_gae(r, v, np.zeros(3, bool), 0.0, 0.7, 9.0)
        assert np.allclose(adv, r - v)
        assert np.allclose(ret, r)

    def test_hand_recursion_returns(self):
        # constant reward 1, zero values, gamma=0.5, lambda=1, bootstrap 0
        r = np.ones(3)
        v = np.zeros(3)
        adv, ret = compute_gae(r, v, np.zeros(3, bool), 0.5, 1.0, 0.0)
        assert np.allclose(ret, [1.75, 1.5, 1.0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = 20
            r = rng.normal(size=n)
            v = rng.normal(size=n)
            dones = rng.random(n) < 0.15
            boot = float(rng.normal())
            gamma, lam = 0.97, 0.9
            adv, ret = compute_gae(r, v, dones, gamma, lam, boot)
            ref = brute_force_gae(r, v, dones, gamma, lam, boot)
            assert np.max(np.abs(adv - ref)) < 1e-10
            assert np.allclose(ret, adv + v)

    def test_misaligned_rejected(self):
        with pytest.raises(ValueError):
            compute_gae(np.zeros(3), np.zeros(4), np.zeros(3, bool), 0.9, 0.9)


def make_batch(policy, env, n, seed):
    rng = np.random.default_rng(seed)
    batch, _, _ = collect_rollout(env, policy, n, rng)
    return batch


class TestPpoUpdate:
    def _toy(self, seed=0):
        rng = np.random.default_rng(seed)
        policy = make_policy(1, [-1.0], [1.0], rng, hidden=(8,),
                             log_std_init=-0.5)
        env = PointMassEnv(episode_len=10)
        return policy, env

    def test_zero_advantages_leave_policy_unchanged(self):
        policy, env = self._toy()
        batch = make_batch(policy, env, 64, 1)
        # constant rewards and values, no dones: advantages are ~0 everywhere
        batch.rewards[:] = 1.0
        batch.values[:] = 1.0 / (1.0 - 0.99)
        batch.dones[:] = False
        batch.bootstrap_value = 1.0 / (1.0 - 0.99)
        before = [w.copy() for w in policy.mlp.weights]
        log_std_before = policy.log_std.copy()
        cfg = PpoConfig(update_epochs=2, minibatch_size=32, total_steps=64,
                        seed=0)
        ppo_update(policy, batch, cfg, adam_init(policy.params(), lr=3e-4),
                   np.random.default_rng(0))
        for w0, w1 in zip(before, policy.mlp.weights):
            assert np.max(np.abs(w1 - w0)) < 1e-5
        assert np.max(np.abs(policy.log_std - log_std_before)) < 1e-5

    def test_first_minibatch_ratio_is_one(self):
        policy, env = self._toy(1)
        batch = make_batch(policy, env, 32, 2)
        from catchsim.nn import mlp_forward
        mean = mlp_forward(policy.mlp, batch.obs).astype(np.float64)
        std = np.exp(policy.log_std.astype(np.float64))
        z = (batch.pre_squash - mean) / std
        gauss = (-0.5 * z * z - np.log(std) - 0.5 * np.log(2 * np.pi))
        corr = 2.0 * (np.log(2.0) - batch.pre_squash
                      - np.logaddexp(0.0, -2.0 * batch.pre_squash)) \
            + np.log(policy._scale)
        new_lp = np.sum(gauss - corr, axis=1)
        ratio = np.exp(new_lp - batch.log_probs)
        assert np.allclose(ratio, 1.0, atol=1e-8)

    def test_surrogate_gradient_matches_finite_difference(self):
        # tiny linear policy: weights (1x1) + bias (1) + log_std (1) + value
        rng = np.random.default_rng(3)
        policy = make_policy(1, [-1.0], [1.0], rng, hidden=(),
                             log_std_init=-0.3)
        env = PointMassEnv(episode_len=8)
        batch = make_batch(policy, env, 48, 4)
        cfg = PpoConfig(update_epochs=1, minibatch_size=48, total_steps=48)
        adv, _ = compute_gae(batch.rewards, batch.values, batch.dones,
                             cfg.gamma, cfg.lam, batch.bootstrap_value)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        def surrogate():
            from catchsim.nn import mlp_forward
            mean = mlp_forward(policy.mlp, batch.obs).astype(np.float64)
            std = np.exp(policy.log_std.astype(np.float64))
            z = (batch.pre_squash - mean) / std
            gauss = -0.5 * z * z - np.log(std) - 0.5 * np.log(2 * np.pi)
            corr = 2.0 * (np.log(2.0) - batch.pre_squash
                          - np.logaddexp(0.0, -2.0 * batch.pre_squash)) \
                + np.log(policy._scale)
            lp = np.sum(gauss - corr, axis=1)
            ratio = np.exp(lp - batch.log_probs)
            clipped = np.clip(ratio, 0.8, 1.2) * adv
            return float(np.mean(np.minimum(ratio * adv, clipped)))

        # analytic gradient of the surrogate at ratio == 1
        from catchsim.nn import mlp_forward
        mean = mlp_forward(policy.mlp, batch.obs).astype(np.float64)
        std = np.exp(policy.log_std.astype(np.float64))
        z = (batch.pre_squash - mean) / std
        dlp = adv / len(batch)  # ratio = 1, all active
        dmean_an = np.sum(dlp[:, None] * (z / std) * batch.obs, axis=0)

        h = 1e-5
        w = policy.mlp.weights[0]
        orig = w[0, 0]
        w[0, 0] = orig + h
        up = surrogate()
        w[0, 0] = orig - h
        dn = surrogate()
        w[0, 0] = orig
        fd = (up - dn) / (2 * h)
        assert abs(fd - dmean_an[0]) <= max(1e-4, 1e-2 * abs(fd))

    def test_nan_loss_aborts(self):
        policy, env = self._toy(5)
        batch = make_batch(policy, env, 32, 6)
        batch.rewards[5] = np.nan
        cfg = PpoConfig(update_epochs=1, minibatch_size=32, total_steps=32)
        with pytest.raises(PpoNanError):
            ppo_update(policy, batch, cfg, adam_init(policy.params()),
                       np.random.default_rng(0))


class TestVanillaPolicyGradientLimit:
    def test_huge_clip_matches_vanilla_direction(self):
        rng = np.random.default_rng(7)
        policy = make_policy(1, [-1.0], [1.0], rng, hidden=(4,))
        env = PointMassEnv(episode_len=10)
        batch = make_batch(policy, env, 128, 8)
        cfg = PpoConfig(clip_ratio=0.999999, update_epochs=1,
                        minibatch_size=128, total_steps=128)
        adv, _ = compute_gae(batch.rewards, batch.values, batch.dones,
                             cfg.gamma, cfg.lam, batch.bootstrap_value)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        from catchsim.nn import mlp_backward, mlp_forward_cache
        mean, cache = mlp_forward_cache(policy.mlp, batch.obs)
        std = np.exp(policy.log_std.astype(np.float64))
        z = (batch.pre_squash - mean.astype(np.float64)) / std
        # ratio == 1 on the first pass: surrogate gradient = vanilla PG
        dlp = adv / len(batch)
        dmean_pg = (dlp[:, None] * (z / std)).astype(np.float32)
        pg_grads, _ = mlp_backward(policy.mlp, cache, dmean_pg)
        # one ppo_update epoch with enormous clip and tiny lr: compare signs
        before = {k: v.copy() for k, v in policy.mlp.params("pi/").items()}
        adam = adam_init(policy.params(), lr=1e-6)
        ppo_update(policy, batch, cfg, adam, np.random.default_rng(0))
        moved = {k: policy.mlp.params("pi/")[k] - before[k]
                 for k in before}
        # Adam first step is -lr*sign(grad); our loss is the negated surrogate
        for k, g in pg_grads.items():
            mk = moved[f"pi/{k}"]
            mask = np.abs(g) > 1e-6
            if mask.any():
                agree = np.sign(mk[mask]) == np.sign(g[mask])
                assert np.mean(agree) > 0.999


class TestTraining:
    def test_point_mass_improves(self):
        env = PointMassEnv()
        cfg = PpoConfig(total_steps=12000, rollout_steps=1024,
                        minibatch_size=256, update_epochs=6, hidden=(32, 32),
                        lr=1e-3, seed=3)
        policy, curve = train_policy(env, cfg)
        assert curve[-1].mean_reward > curve[0].mean_reward
        # trained point mass parks near the origin
        rng = np.random.default_rng(0)
        obs = env.reset(rng)
        for _ in range(40):
            a, _, _ = policy_act(policy, obs, stochastic=False)
            obs, r, done, info = env.step(a)
        assert abs(env.x) < 0.15

    def test_deterministic_rerun(self):
        env1, env2 = PointMassEnv(), PointMassEnv()
        cfg = PpoConfig(total_steps=2048, rollout_steps=512, hidden=(8,),
                        update_epochs=2, minibatch_size=128, seed=11)
        p1, c1 = train_policy(env1, cfg)
        p2, c2 = train_policy(env2, cfg)
        assert [(p.step, p.mean_reward) for p in c1] == \
            [(p.step, p.mean_reward) for p in c2]
        for k, v in p1.params().items():
            assert np.array_equal(v, p2.params()[k])

    def test_value_converges_on_fixed_bandit(self):
        class Bandit:
            obs_dim = 1

            def action_bounds(self):
                return np.array([-1.0]), np.array([1.0])

            def reset(self, rng):
                return np.zeros(1, dtype=np.float32)

            def step(self, action):
                return np.zeros(1, dtype=np.float32), 1.0, True, {}

        env = Bandit()
        cfg = PpoConfig(total_steps=6000, rollout_steps=512, hidden=(8,),
                        update_epochs=4, minibatch_size=128, gamma=0.9,
                        lr=3e-3, seed=2)
        policy, _ = train_policy(env, cfg)
        v = policy_value(policy, np.zeros(1, dtype=np.float32))
        assert abs(v - 1.0) < 0.05

    def test_curve_text_format(self):
        env = PointMassEnv()
        cfg = PpoConfig(total_steps=512, rollout_steps=256, hidden=(4,),
                        update_epochs=1, minibatch_size=64, seed=0)
        _, curve = train_policy(env, cfg)
        text = curve_text(curve)
        lines = text.strip().splitlines()
        assert lines[0].split() == ["step", "mean_reward", "success_rate",
                                    "clip_fraction"]
        assert len(lines) == len(curve) + 1
