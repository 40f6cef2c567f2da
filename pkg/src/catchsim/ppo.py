"""Proximal Policy Optimization with generalized advantage estimation.

Single-threaded rollout collection (bit-reproducible under a fixed seed),
clipped surrogate objective, and a joint value-regression head. Gradients
flow through the hand-written backward passes in nn.py.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import AdamState, adam_init, adam_step, mlp_backward, mlp_forward_cache
from .policies import PolicyParams, make_policy, policy_act, squash_log_prob


class PpoNanError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    clip_ratio: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    rollout_steps: int = 2048
    update_epochs: int = 10
    minibatch_size: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    total_steps: int = 200_000       # paper scale: 4,000,000
    lr: float = 3e-4
    hidden: tuple = (256, 256)
    log_std_init: float = -0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip ratio must be in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lambda must be in (0, 1]")


@dataclass
class RolloutBatch:
    obs: np.ndarray          # (N, obs_dim) float32
    actions: np.ndarray      # (N, act_dim) squashed actions
    pre_squash: np.ndarray   # (N, act_dim) Gaussian samples PPO ratios need
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray        # True where the episode ended after this step
    term_reasons: list
    bootstrap_value: float = 0.0

    def __len__(self):
        return len(self.rewards)


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float, bootstrap_value: float = 0.0):
    """Standard GAE recursion; returns raw (advantages, returns).

    `bootstrap_value` estimates the value after the last step when the
    rollout was truncated mid-episode.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("misaligned GAE inputs")
    n = len(rewards)
    adv = np.zeros(n)
    next_value = bootstrap_value
    next_adv = 0.0
    for t in range(n - 1, -1, -1):
        mask = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * mask - values[t]
        next_adv = delta + gamma * lam * mask * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def ppo_update(policy: PolicyParams, batch: RolloutBatch, cfg: PpoConfig,
               adam: AdamState, rng: np.random.Generator) -> dict:
    """One PPO update over the batch; mutates policy in place.

    Returns stats: losses, clip fraction, and a KL estimate.
    """
    adv, returns = compute_gae(batch.rewards, batch.values, batch.dones,
                               cfg.gamma, cfg.lam, batch.bootstrap_value)
    astd = float(adv.std())
    adv = (adv - adv.mean()) / (astd + 1e-8)
    n = len(batch)
    idx = np.arange(n)
    log_std = policy.log_std.astype(np.float64)
    clip_events = 0
    clip_total = 0
    pi_losses, vf_losses, kls = [], [], []
    params = policy.params()
    for _ in range(cfg.update_epochs):
        rng.shuffle(idx)
        for start in range(0, n, cfg.minibatch_size):
            mb = idx[start:start + cfg.minibatch_size]
            obs = batch.obs[mb]
            u = batch.pre_squash[mb]
            old_lp = batch.log_probs[mb]
            mb_adv = adv[mb]
            mean, pi_cache = mlp_forward_cache(policy.mlp, obs)
            mean64 = mean.astype(np.float64)
            log_std = policy.log_std.astype(np.float64)
            std = np.exp(log_std)
            z = (u - mean64) / std
            gauss = -0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi)
            # tanh-correction terms depend only on u: identical in old and
            # new log probs, so fold them in once for exactness
            corr = (2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
                    + np.log(policy._scale))
            new_lp = np.sum(gauss - corr, axis=1)
            ratio = np.exp(new_lp - old_lp)
            unclipped = ratio * mb_adv
            clipped = np.clip(ratio, 1.0 - cfg.clip_ratio,
                              1.0 + cfg.clip_ratio) * mb_adv
            take_unclipped = unclipped <= clipped
            in_range = np.abs(ratio - 1.0) < cfg.clip_ratio
            active = take_unclipped | in_range
            clip_events += int(np.sum(~take_unclipped))
            clip_total += len(mb)
            # d(surrogate)/d(new_lp), for the maximized objective
            dlp = np.where(active, ratio * mb_adv, 0.0) / len(mb)
            # loss = -surrogate: gradients below descend
            dmean = (-dlp[:, None]) * (z / std)
            dlogstd = np.sum((-dlp[:, None]) * (z * z - 1.0), axis=0)
            if cfg.entropy_coef != 0.0:
                # Gaussian entropy depends only on log_std
                dlogstd -= cfg.entropy_coef * np.ones_like(dlogstd)
            pi_grads, _ = mlp_backward(policy.mlp, pi_cache,
                                       dmean.astype(np.float32))
            v_pred, vf_cache = mlp_forward_cache(policy.value, obs)
            v_err = v_pred[:, 0].astype(np.float64) - returns[mb]
            vf_loss = float(np.mean(v_err ** 2))
            dv = (cfg.value_coef * 2.0 * v_err / len(mb))[:, None]
            vf_grads, _ = mlp_backward(policy.value, vf_cache,
                                       dv.astype(np.float32))
            grads = {f"pi/{k}": v for k, v in pi_grads.items()}
            grads["log_std"] = dlogstd.astype(np.float32)
            grads.update({f"vf/{k}": v for k, v in vf_grads.items()})
            pi_loss = -float(np.mean(np.minimum(unclipped, clipped)))
            if not (math.isfinite(pi_loss) and math.isfinite(vf_loss)):
                raise PpoNanError(
                    f"non-finite PPO loss (pi={pi_loss}, vf={vf_loss}); "
                    f"ratio range [{ratio.min()}, {ratio.max()}]")
            adam_step(params, grads, adam)
            policy.clamp_log_std()
            pi_losses.append(pi_loss)
            vf_losses.append(vf_loss)
            kls.append(float(np.mean(old_lp - new_lp)))
    return {
        "pi_loss": float(np.mean(pi_losses)),
        "vf_loss": float(np.mean(vf_losses)),
        "clip_fraction": clip_events / max(clip_total, 1),
        "approx_kl": float(np.mean(kls)),
    }


def collect_rollout(env, policy: PolicyParams, n_steps: int,
                    rng: np.random.Generator, obs=None):
    """Gather n_steps of on-policy experience, continuing across episodes.

    Returns (batch, episode_records, last_obs). episode_records are
    (return, length, success) tuples for episodes finished in this rollout.
    """
    from .policies import policy_value

    obs_dim = policy.obs_dim
    act_dim = policy.act_dim
    obs_buf = np.empty((n_steps, obs_dim), dtype=np.float32)
    act_buf = np.empty((n_steps, act_dim))
    u_buf = np.empty((n_steps, act_dim))
    rew_buf = np.empty(n_steps)
    val_buf = np.empty(n_steps)
    lp_buf = np.empty(n_steps)
    done_buf = np.zeros(n_steps, dtype=bool)
    reasons = []
    episodes = []
    ep_ret, ep_len = 0.0, 0
    if obs is None:
        obs = env.reset(rng)
    for t in range(n_steps):
        action, lp, u = policy_act(policy, obs, stochastic=True, rng=rng)
        value = policy_value(policy, obs)
        nobs, reward, done, info = env.step(action)
        obs_buf[t] = obs
        act_buf[t] = action
        u_buf[t] = u
        rew_buf[t] = reward
        val_buf[t] = value
        lp_buf[t] = lp
        done_buf[t] = done
        reasons.append(info.get("term_reason", ""))
        ep_ret += reward
        ep_len += 1
        if done:
            episodes.append((ep_ret, ep_len, bool(info.get("success", False))))
            ep_ret, ep_len = 0.0, 0
            obs = env.reset(rng)
        else:
            obs = nobs
    bootstrap = 0.0 if done_buf[-1] else policy_value(policy, obs)
    batch = RolloutBatch(obs_buf, act_buf, u_buf, rew_buf, val_buf, lp_buf,
                         done_buf, reasons, bootstrap)
    return batch, episodes, obs


@dataclass
class CurvePoint:
    step: int
    mean_reward: float
    success_rate: float
    clip_fraction: float


def curve_text(curve) -> str:
    lines = ["step mean_reward success_rate clip_fraction"]
    for p in curve:
        lines.append(f"{p.step} {p.mean_reward:.6f} {p.success_rate:.6f} "
                     f"{p.clip_fraction:.6f}")
    return "\n".join(lines) + "\n"


def train_policy(env, cfg: PpoConfig, policy: PolicyParams | None = None,
                 progress=None):
    """PPO training loop; returns (policy, curve).

    Deterministic under cfg.seed: environment randomness, exploration noise
    and minibatch shuffles all derive from one seeded generator.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    if policy is None:
        lo, hi = env.action_bounds()
        policy = make_policy(env.obs_dim, lo, hi, rng, hidden=cfg.hidden,
                             log_std_init=cfg.log_std_init)
    adam = adam_init(policy.params(), lr=cfg.lr)
    curve = []
    steps_done = 0
    obs = None
    while steps_done < cfg.total_steps:
        n = min(cfg.rollout_steps, cfg.total_steps - steps_done)
        batch, episodes, obs = collect_rollout(env, policy, n, rng, obs)
        stats = ppo_update(policy, batch, cfg, adam, rng)
        steps_done += n
        if episodes:
            mean_rew = float(np.mean([e[0] for e in episodes]))
            succ = float(np.mean([e[2] for e in episodes]))
        else:
            mean_rew, succ = float("nan"), 0.0
        point = CurvePoint(steps_done, mean_rew, succ, stats["clip_fraction"])
        curve.append(point)
        if progress is not None:
            progress(point, stats)
    return policy, curve
