"""Clipped-surrogate policy optimization over the survival twin.

Everything is hand-rolled on numpy: rollout collection, generalized
advantage estimation, reverse-mode gradients through the fixed MLP, and
an Adam step. Training is bitwise-reproducible for a given seed because
every random draw (episode seeds, action sampling, minibatch shuffles)
flows from explicit generators.

Checkpoints are written whenever the cumulative episode count crosses a
multiple of checkpoint_every_episodes, and the checkpoint with the
highest recorded mean episode reward is selected at the end.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import policy, twinsim
from .policy import PolicyParams
from .twinsim import SpacecraftConfig


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    epochs_per_iter: int = 4
    minibatch_size: int = 256
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    episodes_per_iteration: int = 8
    total_iterations: int = 40
    checkpoint_every_episodes: int = 5
    seed: int = 0
    # (iteration, battery_factor, wheel_factor); factors apply to the base config.
    hardening: tuple = ()

    def validate(self) -> "TrainConfig":
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0.0:
            raise ValueError("clip_epsilon must be positive")
        for name in ("epochs_per_iter", "minibatch_size", "episodes_per_iteration",
                     "total_iterations", "checkpoint_every_episodes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        return self


@dataclass(eq=False)
class Trajectory:
    """One complete episode; a terminal step can only be the last one."""

    obs: np.ndarray        # (T, 16)
    actions: np.ndarray    # (T,) int
    logps: np.ndarray      # (T,)
    rewards: np.ndarray    # (T,)
    values: np.ndarray     # (T,)
    terminated: bool
    truncated: bool
    bootstrap_value: float  # value estimate past the end; 0 after failure
    max_steps: int          # full episode length in decision steps

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def survival_fraction(self) -> float:
        if self.terminated:
            # Count only the survived steps; the terminal one is the failure.
            return (len(self.rewards) - 1) / self.max_steps
        return 1.0


def _episode_seed(train_seed: int, episode_index: int) -> int:
    # Stable, collision-free mapping from (seed, episode) to env seeds.
    return int(np.random.SeedSequence((train_seed, episode_index)).generate_state(1)[0])


def rollout_episode(env_config: SpacecraftConfig, params: PolicyParams,
                    seed: int, deterministic: bool = False) -> Trajectory:
    """Play one full episode; actions are sampled unless deterministic."""
    action_rng = np.random.default_rng((seed, 1))
    state, obs = twinsim.reset(env_config, seed)
    obs_list, actions, logps, rewards, values = [], [], [], [], []
    terminated = truncated = False
    bootstrap = 0.0
    while True:
        logits, value = policy.forward(params, obs)
        dist = policy.distribution(logits)
        if deterministic:
            action = policy.argmax(dist)
        else:
            action = policy.sample(dist, action_rng)
        state, result = twinsim.step(state, action, env_config)
        obs_list.append(obs)
        actions.append(int(action))
        logps.append(math.log(max(float(dist[int(action)]), 1e-300)))
        rewards.append(result.reward)
        values.append(value)
        obs = result.observation
        terminated, truncated = result.terminated, result.truncated
        if terminated or truncated:
            if truncated:
                _, bootstrap = policy.forward(params, obs)
            break
    return Trajectory(
        obs=np.asarray(obs_list), actions=np.asarray(actions, dtype=np.int64),
        logps=np.asarray(logps), rewards=np.asarray(rewards),
        values=np.asarray(values), terminated=terminated, truncated=truncated,
        bootstrap_value=float(bootstrap), max_steps=env_config.steps_per_episode,
    )


def collect_rollouts(env_config: SpacecraftConfig, params: PolicyParams,
                     n_episodes: int, seeds: list[int]) -> list[Trajectory]:
    """n_episodes independent episodes, one per seed, deterministic each."""
    if len(seeds) != n_episodes:
        raise ValueError("need exactly one seed per episode")
    return [rollout_episode(env_config, params, seed) for seed in seeds]


def gae(traj: Trajectory, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one trajectory.

    Bootstraps with 0 past a failure (absorbing) and with the recorded
    value estimate past a truncation.
    """
    n = len(traj.rewards)
    advantages = np.zeros(n)
    next_value = traj.bootstrap_value
    next_advantage = 0.0
    for t in range(n - 1, -1, -1):
        done = traj.terminated and t == n - 1
        mask = 0.0 if done else 1.0
        delta = traj.rewards[t] + gamma * next_value * mask - traj.values[t]
        next_advantage = delta + gamma * lam * mask * next_advantage
        advantages[t] = next_advantage
        next_value = traj.values[t]
    return advantages, advantages + traj.values


def build_batch(trajectories: list[Trajectory], gamma: float, lam: float) -> dict:
    """Concatenate trajectories and normalize advantages (mean 0, std 1)."""
    advs, rets = [], []
    for traj in trajectories:
        a, r = gae(traj, gamma, lam)
        advs.append(a)
        rets.append(r)
    advantages = np.concatenate(advs)
    advantages = (advantages - advantages.mean()) / max(float(advantages.std()), 1e-8)
    return {
        "obs": np.concatenate([t.obs for t in trajectories]),
        "actions": np.concatenate([t.actions for t in trajectories]),
        "old_logps": np.concatenate([t.logps for t in trajectories]),
        "advantages": advantages,
        "returns": np.concatenate(rets),
    }


def clipped_surrogate(ratio: np.ndarray, advantage: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-sample clipped objective min(ratio*A, clip(ratio)*A)."""
    return np.minimum(ratio * advantage,
                      np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage)


def ppo_loss_and_grad(params: PolicyParams, batch: dict, cfg: TrainConfig) -> tuple[dict, PolicyParams]:
    """Total loss and its analytic gradient over one (mini)batch.

    Loss = -mean(clipped surrogate) + value_coef * mean((V - returns)^2)
           - entropy_coef * mean(entropy).
    """
    obs = batch["obs"]
    actions = batch["actions"]
    old_logps = batch["old_logps"]
    adv = batch["advantages"]
    returns = batch["returns"]
    n = len(actions)

    # Overflow along the way is handled, not a bug: the caller checks the
    # total loss for finiteness and aborts the iteration on failure.
    with np.errstate(over="ignore", invalid="ignore"):
        h1 = np.tanh(obs @ params.w1 + params.b1)
        h2 = np.tanh(h1 @ params.w2 + params.b2)
        logits = h2 @ params.w_act + params.b_act
        values = (h2 @ params.w_val + params.b_val)[:, 0]

        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        logp_all = shifted - np.log(exp.sum(axis=1, keepdims=True))
        idx = np.arange(n)
        logps = logp_all[idx, actions]

        ratio = np.exp(logps - old_logps)
        clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
        surr_unclipped = ratio * adv
        surr_clipped = clipped * adv
        policy_obj = np.minimum(surr_unclipped, surr_clipped)
        entropy = -(probs * logp_all).sum(axis=1)
        value_err = values - returns

        policy_loss = -float(policy_obj.mean())
        value_loss = float((value_err ** 2).mean())
        entropy_mean = float(entropy.mean())
        total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy_mean

        # Backward pass. Gradient flows through the unclipped ratio only
        # where it is the active branch of the min.
        use_unclipped = (surr_unclipped <= surr_clipped).astype(float)
        dlogps = -(use_unclipped * adv * ratio) / n

        dlogits = np.zeros_like(logits)
        dlogits[idx, actions] += dlogps
        dlogits -= probs * dlogps[:, None]
        # Entropy term: dH/dlogits_j = -p_j (logp_j + H)
        dlogits += (cfg.entropy_coef / n) * probs * (logp_all + entropy[:, None])

        dvalues = (2.0 * cfg.value_coef / n) * value_err

        d_w_act = h2.T @ dlogits
        d_b_act = dlogits.sum(axis=0)
        d_w_val = (h2.T @ dvalues)[:, None]
        d_b_val = np.array([dvalues.sum()])

        dh2 = dlogits @ params.w_act.T + dvalues[:, None] * params.w_val[:, 0]
        dpre2 = dh2 * (1.0 - h2 ** 2)
        d_w2 = h1.T @ dpre2
        d_b2 = dpre2.sum(axis=0)

        dh1 = dpre2 @ params.w2.T
        dpre1 = dh1 * (1.0 - h1 ** 2)
        d_w1 = obs.T @ dpre1
        d_b1 = dpre1.sum(axis=0)

    grads = PolicyParams(d_w1, d_b1, d_w2, d_b2, d_w_act, d_b_act, d_w_val, d_b_val)
    stats = {
        "total_loss": total,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy_mean,
    }
    return stats, grads


@dataclass(eq=False)
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: PolicyParams) -> "AdamState":
        arrays = policy._param_list(params)
        return cls(m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays], t=0)


def adam_step(params: PolicyParams, grads: PolicyParams, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> PolicyParams:
    state.t += 1
    new_arrays = []
    for i, (p, g) in enumerate(zip(policy._param_list(params), policy._param_list(grads))):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1 ** state.t)
        v_hat = state.v[i] / (1.0 - beta2 ** state.t)
        new_arrays.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return PolicyParams(*new_arrays)


def ppo_update(params: PolicyParams, batch: dict, cfg: TrainConfig,
               rng: np.random.Generator,
               opt_state: AdamState | None = None) -> tuple[PolicyParams, dict, AdamState]:
    """Multi-epoch minibatch update; aborts and keeps params on non-finite loss."""
    if len(batch["actions"]) == 0:
        raise ValueError("batch must be nonempty")
    if opt_state is None:
        opt_state = AdamState.for_params(params)
    n = len(batch["actions"])
    current = params
    sums = {"total_loss": 0.0, "policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    passes = 0
    for _ in range(cfg.epochs_per_iter):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            pick = order[start:start + cfg.minibatch_size]
            mini = {key: batch[key][pick] for key in batch}
            stats, grads = ppo_loss_and_grad(current, mini, cfg)
            if not math.isfinite(stats["total_loss"]):
                return params, {**stats, "aborted": True}, opt_state
            current = adam_step(current, grads, opt_state, cfg.learning_rate)
            for key in sums:
                sums[key] += stats[key]
            passes += 1
    breakdown = {key: sums[key] / passes for key in sums}
    breakdown["aborted"] = False
    return current, breakdown, opt_state


def select_best(checkpoint_rewards: list[float]) -> int:
    """Index of the checkpoint with the highest mean episode reward.

    Exact ties go to the latest checkpoint: equal reward means equal
    evidence, and the later policy has seen more training.
    """
    if not checkpoint_rewards:
        raise ValueError("no checkpoints to select from")
    best = max(checkpoint_rewards)
    return max(i for i, r in enumerate(checkpoint_rewards) if r == best)


@dataclass(eq=False)
class TrainReport:
    iterations: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)   # {path, episode_count, mean_reward}
    selected_checkpoint: str | None = None
    selected_mean_reward: float | None = None

    def to_json(self) -> str:
        return json.dumps({
            "iterations": self.iterations,
            "checkpoints": self.checkpoints,
            "selected_checkpoint": self.selected_checkpoint,
            "selected_mean_reward": self.selected_mean_reward,
        }, indent=2, sort_keys=True)


def train(env_config: SpacecraftConfig, cfg: TrainConfig, out_dir: str,
          progress=None) -> TrainReport:
    """Full training loop: collect, estimate advantages, update, checkpoint.

    The hardening schedule swaps in a scaled copy of the base env config
    at the scheduled iterations. Checkpoints land in out_dir.
    """
    cfg.validate()
    env_config.validate()
    os.makedirs(out_dir, exist_ok=True)

    params = policy.init_params(cfg.seed)
    update_rng = np.random.default_rng((cfg.seed, 2))
    opt_state = AdamState.for_params(params)
    hardening = {int(it): (bf, wf) for it, bf, wf in cfg.hardening}

    report = TrainReport()
    active_config = env_config
    episode_count = 0
    next_checkpoint = cfg.checkpoint_every_episodes

    for iteration in range(cfg.total_iterations):
        if iteration in hardening:
            bf, wf = hardening[iteration]
            active_config = twinsim.harden(env_config, bf, wf)

        seeds = [_episode_seed(cfg.seed, episode_count + i)
                 for i in range(cfg.episodes_per_iteration)]
        trajectories = collect_rollouts(active_config, params, len(seeds), seeds)
        episode_count += len(trajectories)

        batch = build_batch(trajectories, cfg.gamma, cfg.gae_lambda)
        params, breakdown, opt_state = ppo_update(params, batch, cfg, update_rng, opt_state)

        mean_reward = float(np.mean([t.total_reward for t in trajectories]))
        mean_survival = float(np.mean([t.survival_fraction for t in trajectories]))
        entry = {
            "iteration": iteration,
            "episodes_cumulative": episode_count,
            "mean_episode_reward": mean_reward,
            "mean_survival_fraction": mean_survival,
            "battery_factor": active_config.battery_capacity / env_config.battery_capacity,
            "wheel_factor": active_config.wheel_max_speed / env_config.wheel_max_speed,
            **breakdown,
        }
        report.iterations.append(entry)
        if progress is not None:
            progress(entry)

        while next_checkpoint <= episode_count:
            path = os.path.join(out_dir, f"checkpoint_ep{next_checkpoint:06d}.json")
            policy.save(params, path, metadata={
                "episode_count": next_checkpoint,
                "average_reward": mean_reward,
                "iteration": iteration,
            })
            report.checkpoints.append({
                "path": path,
                "episode_count": next_checkpoint,
                "mean_reward": mean_reward,
            })
            next_checkpoint += cfg.checkpoint_every_episodes

    if report.checkpoints:
        best = select_best([c["mean_reward"] for c in report.checkpoints])
        report.selected_checkpoint = report.checkpoints[best]["path"]
        report.selected_mean_reward = report.checkpoints[best]["mean_reward"]
    return report


def evaluate_policy(env_config: SpacecraftConfig, params: PolicyParams,
                    seeds: list[int], deterministic: bool = True) -> dict:
    """Mean survival fraction and reward of a policy over fixed seeds."""
    fractions, rewards = [], []
    for seed in seeds:
        traj = rollout_episode(env_config, params, seed, deterministic=deterministic)
        fractions.append(traj.survival_fraction)
        rewards.append(traj.total_reward)
    return {
        "mean_survival_fraction": float(np.mean(fractions)),
        "mean_reward": float(np.mean(rewards)),
    }


def evaluate_fixed_action(env_config: SpacecraftConfig, action, seeds: list[int]) -> dict:
    """Baseline: apply one macro action at every step."""
    fractions = []
    for seed in seeds:
        state, _ = twinsim.reset(env_config, seed)
        steps = 0
        terminated = False
        while True:
            state, result = twinsim.step(state, action, env_config)
            steps += 1
            if result.terminated or result.truncated:
                terminated = result.terminated
                break
        total = env_config.steps_per_episode
        fractions.append((steps - 1) / total if terminated else 1.0)
    return {"mean_survival_fraction": float(np.mean(fractions))}


def evaluate_random(env_config: SpacecraftConfig, seeds: list[int]) -> dict:
    """Baseline: uniform-random macro action at every step (seeded)."""
    fractions = []
    for seed in seeds:
        rng = np.random.default_rng((seed, 3))
        state, _ = twinsim.reset(env_config, seed)
        steps = 0
        terminated = False
        while True:
            action = int(rng.integers(0, 3))
            state, result = twinsim.step(state, action, env_config)
            steps += 1
            if result.terminated or result.truncated:
                terminated = result.terminated
                break
        total = env_config.steps_per_episode
        fractions.append((steps - 1) / total if terminated else 1.0)
    return {"mean_survival_fraction": float(np.mean(fractions))}
