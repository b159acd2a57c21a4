"""Soft actor-critic on the learned reward, plus intrinsic pre-training.

The actor outputs a tanh-squashed diagonal Gaussian; twin critics with EMA
targets and an auto-tuned entropy temperature follow the usual recipe. The
pre-training phase optimizes a particle-style novelty bonus (distance to the
k-th nearest previously visited state) to fill the buffer with diverse
experience before any reward exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nets import Adam, DenseNet, mlp
from .replay import AgentBatch, NotEnoughExperience, ReplayBuffer, Transition

LOG_2PI = math.log(2.0 * math.pi)
TANH_EPS = 1e-6


@dataclass
class AgentConfig:
    hidden: int = 128
    n_hidden: int = 2
    lr: float = 3e-4
    batch_size: int = 128
    gamma: float = 0.99
    tau_ema: float = 5e-3
    init_alpha: float = 0.1
    log_std_min: float = -10.0
    log_std_max: float = 2.0


@dataclass
class IntrinsicConfig:
    k: int = 5
    pretrain_steps: int = 9000

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")


class Policy:
    def __init__(self, obs_dim: int, action_dim: int, cfg: AgentConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        dims = [obs_dim] + [cfg.hidden] * cfg.n_hidden
        self.actor = mlp(dims + [2 * action_dim], "relu", rng)
        q_dims = [obs_dim + action_dim] + [cfg.hidden] * cfg.n_hidden + [1]
        self.q1 = mlp(q_dims, "relu", rng)
        self.q2 = mlp(q_dims, "relu", rng)
        self.q1_target = mlp(q_dims, "relu", rng)
        self.q2_target = mlp(q_dims, "relu", rng)
        self.q1_target.copy_params_from(self.q1)
        self.q2_target.copy_params_from(self.q2)
        self.log_alpha = np.array([math.log(cfg.init_alpha)])
        self.target_entropy = -float(action_dim)
        self.actor_opt = Adam(cfg.lr)
        self.q1_opt = Adam(cfg.lr)
        self.q2_opt = Adam(cfg.lr)
        self.alpha_opt = Adam(cfg.lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def _actor_stats(self, states: np.ndarray, record: bool = False):
        out = self.actor.forward(np.atleast_2d(states), record=record)
        mu = out[:, : self.action_dim]
        raw = out[:, self.action_dim :]
        log_std = np.clip(raw, self.cfg.log_std_min, self.cfg.log_std_max)
        clip_mask = (raw > self.cfg.log_std_min) & (raw < self.cfg.log_std_max)
        return mu, log_std, clip_mask

    def sample(self, states: np.ndarray, rng: np.random.Generator, record: bool = False):
        """Reparametrized action sample with its log-probability pieces."""
        mu, log_std, clip_mask = self._actor_stats(states, record=record)
        std = np.exp(log_std)
        eps = rng.standard_normal(mu.shape)
        u = mu + std * eps
        a = np.tanh(u)
        log_prob = (
            -0.5 * eps**2 - log_std - 0.5 * LOG_2PI - np.log(1.0 - a**2 + TANH_EPS)
        ).sum(axis=1)
        return a, log_prob, {"mu": mu, "log_std": log_std, "std": std, "eps": eps,
                             "clip_mask": clip_mask}


def act(policy: Policy, state: np.ndarray, mode: str = "stochastic",
        rng: np.random.Generator | None = None) -> np.ndarray:
    """One action for one state; 'deterministic' returns the squashed mean."""
    state = np.atleast_2d(state)
    if mode == "deterministic":
        mu, _, _ = policy._actor_stats(state)
        return np.tanh(mu)[0]
    if mode != "stochastic":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("stochastic mode needs an rng")
    a, _, _ = policy.sample(state, rng)
    return a[0]


def _q_forward(net: DenseNet, states: np.ndarray, actions: np.ndarray,
               record: bool = False) -> np.ndarray:
    return net.forward(np.concatenate([states, actions], axis=1), record=record)[:, 0]


def actor_loss(policy: Policy, states: np.ndarray, eps: np.ndarray) -> float:
    """mean(alpha * log pi - min Q) under the fixed reparametrization noise eps."""
    mu, log_std, _ = policy._actor_stats(states)
    u = mu + np.exp(log_std) * eps
    a = np.tanh(u)
    logp = (-0.5 * eps**2 - log_std - 0.5 * LOG_2PI
            - np.log(1.0 - a**2 + TANH_EPS)).sum(axis=1)
    q_min = np.minimum(_q_forward(policy.q1, states, a), _q_forward(policy.q2, states, a))
    return float(np.mean(policy.alpha * logp - q_min))


def actor_loss_grads(policy: Policy, states: np.ndarray, eps: np.ndarray):
    """Actor loss, its gradients w.r.t. actor parameters, and the sampled log pi."""
    n = len(states)
    alpha = policy.alpha
    mu, log_std, clip_mask = policy._actor_stats(states, record=True)
    std = np.exp(log_std)
    u = mu + std * eps
    a = np.tanh(u)
    logp = (-0.5 * eps**2 - log_std - 0.5 * LOG_2PI
            - np.log(1.0 - a**2 + TANH_EPS)).sum(axis=1)
    q1_pi = _q_forward(policy.q1, states, a, record=True)
    q2_pi = _q_forward(policy.q2, states, a, record=True)
    use_q1 = q1_pi <= q2_pi
    loss = float(np.mean(alpha * logp - np.minimum(q1_pi, q2_pi)))
    up1 = np.where(use_q1, -1.0 / n, 0.0)[:, None]
    up2 = np.where(~use_q1, -1.0 / n, 0.0)[:, None]
    d_action = (
        policy.q1.backward(up1).input_grad[:, policy.obs_dim :]
        + policy.q2.backward(up2).input_grad[:, policy.obs_dim :]
    )  # dL/da from the -min(Q1,Q2) term, already includes the 1/n
    one_m_a2 = 1.0 - a**2
    g_tanh = 2.0 * a * one_m_a2 / (one_m_a2 + TANH_EPS)  # d log_prob / du
    sigma_eps = std * eps
    d_mu = (alpha / n) * g_tanh + d_action * one_m_a2
    d_log_std = ((alpha / n) * (g_tanh * sigma_eps - 1.0)
                 + d_action * one_m_a2 * sigma_eps) * clip_mask
    tape = policy.actor.backward(np.concatenate([d_mu, d_log_std], axis=1))
    return loss, tape.grads, logp


def sac_update(policy: Policy, batch: AgentBatch, rng: np.random.Generator) -> dict:
    """One critic step, one actor step, one temperature step, one EMA update."""
    cfg = policy.cfg
    n = len(batch.states)
    alpha = policy.alpha

    # -- critics against the soft Bellman target
    next_a, next_logp, _ = policy.sample(batch.next_states, rng)
    q_next = np.minimum(
        _q_forward(policy.q1_target, batch.next_states, next_a),
        _q_forward(policy.q2_target, batch.next_states, next_a),
    )
    target = batch.learned_rewards + cfg.gamma * (~batch.terminals) * (q_next - alpha * next_logp)
    critic_losses = []
    for net, opt in ((policy.q1, policy.q1_opt), (policy.q2, policy.q2_opt)):
        q = _q_forward(net, batch.states, batch.actions, record=True)
        err = q - target
        critic_losses.append(float(np.mean(err**2)))
        tape = net.backward((2.0 * err / n)[:, None])
        opt.step(net.parameters(), tape.grads)

    # -- actor by reparametrization through the (fresh) minimum critic
    eps = rng.standard_normal((n, policy.action_dim))
    actor_loss, actor_grads, logp = actor_loss_grads(policy, batch.states, eps)
    policy.actor_opt.step(policy.actor.parameters(), actor_grads)

    # -- temperature on the detached log-probabilities
    alpha_grad = np.array([-alpha * float(np.mean(logp + policy.target_entropy))])
    alpha_loss = float(-policy.log_alpha[0] * np.mean(logp + policy.target_entropy))
    policy.alpha_opt.step([policy.log_alpha], [alpha_grad])

    # -- EMA targets
    for online, target_net in ((policy.q1, policy.q1_target), (policy.q2, policy.q2_target)):
        for p, tp in zip(online.parameters(), target_net.parameters()):
            tp *= 1.0 - cfg.tau_ema
            tp += cfg.tau_ema * p
    policy.updates += 1
    return {
        "critic_loss": float(np.mean(critic_losses)),
        "actor_loss": actor_loss,
        "alpha_loss": alpha_loss,
        "alpha": policy.alpha,
        "entropy": float(-np.mean(logp)),
    }


# -- intrinsic exploration -------------------------------------------------------


def intrinsic_reward(buffer_states: np.ndarray, state: np.ndarray, k: int) -> float:
    """log(1 + distance to the k-th nearest buffered state)."""
    buffer_states = np.atleast_2d(buffer_states)
    if len(buffer_states) < k:
        raise NotEnoughExperience(f"need at least {k} states, have {len(buffer_states)}")
    d = np.linalg.norm(buffer_states - np.asarray(state), axis=1)
    kth = np.partition(d, k - 1)[k - 1]
    return float(np.log1p(kth))


def explore_pretrain(policy: Policy, env, buffer: ReplayBuffer, icfg: IntrinsicConfig,
                     rng: np.random.Generator, updates_per_step: int = 1,
                     episode_hook=None) -> int:
    """Fill the buffer with `icfg.pretrain_steps` novelty-seeking env steps.

    The stored learned-reward entry is tanh(bonus) so it respects the buffer's
    reward range; it gets relabelled by the reward model later anyway. Returns
    the number of completed episodes.
    """
    episode = 0
    step_in_ep = 0
    state = env.reset(int(rng.integers(2**31)))
    episode_return = 0.0
    for step in range(icfg.pretrain_steps):
        action = act(policy, state.observation, "stochastic", rng)
        nxt, gt_reward = env.step(state, action)
        if step >= icfg.k:
            bonus = intrinsic_reward(buffer.states[: buffer.size], state.observation, icfg.k)
        else:
            bonus = 0.0
        buffer.push(
            Transition(state.observation, action, nxt.observation, float(np.tanh(bonus)),
                       gt_reward, nxt.done, episode, step_in_ep)
        )
        episode_return += gt_reward
        state = nxt
        step_in_ep += 1
        if nxt.done:
            if episode_hook is not None:
                episode_hook(episode, step + 1, episode_return)
            episode += 1
            step_in_ep = 0
            episode_return = 0.0
            state = env.reset(int(rng.integers(2**31)))
        if buffer.size >= policy.cfg.batch_size:
            for _ in range(updates_per_step):
                sac_update(policy, buffer.sample_transitions(policy.cfg.batch_size, rng), rng)
    return episode
