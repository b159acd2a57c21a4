from __future__ import annotations

import numpy as np
import pytest

from preflab.envs import PointMass2D
from preflab.replay import NotEnoughExperience, ReplayBuffer, Transition
from preflab.sac import (
    AgentConfig,
    IntrinsicConfig,
    Policy,
    act,
    actor_loss,
    actor_loss_grads,
    explore_pretrain,
    intrinsic_reward,
    sac_update,
)

from oracles import assert_grads_close, finite_difference

TINY = AgentConfig(hidden=16, n_hidden=2, batch_size=16, lr=1e-3)


def _policy(seed=0, cfg=TINY, obs=4, act_dim=2):
    return Policy(obs, act_dim, cfg, np.random.default_rng(seed))


def _batch(rng, n=16, obs=4, act_dim=2, rewards=None):
    return_type = rewards if rewards is not None else rng.uniform(-1, 1, n)
    from preflab.replay import AgentBatch

    dones = rng.random(n) < 0.1
    return AgentBatch(
        states=rng.normal(size=(n, obs)),
        actions=rng.uniform(-1, 1, (n, act_dim)),
        next_states=rng.normal(size=(n, obs)),
        learned_rewards=return_type,
        dones=dones,
        terminals=dones,
        indices=np.arange(n),
    )


def test_act_deterministic_is_repeatable():
    policy = _policy()
    s = np.random.default_rng(1).normal(size=4)
    a1 = act(policy, s, "deterministic")
    a2 = act(policy, s, "deterministic")
    assert np.array_equal(a1, a2)


def test_actions_bounded_over_many_samples():
    policy = _policy(2)
    rng = np.random.default_rng(2)
    states = rng.normal(size=(10_000, 4)) * 5
    a, _, _ = policy.sample(states, rng)
    assert np.all(a >= -1.0) and np.all(a <= 1.0)


def test_zero_weight_actor_outputs_tanh_bias():
    policy = _policy(3)
    for layer in policy.actor.layers:
        layer.w[...] = 0.0
        layer.b[...] = 0.0
    policy.actor.layers[-1].b[:2] = [0.4, -0.2]
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = act(policy, rng.normal(size=4), "deterministic")
        assert np.allclose(a, np.tanh([0.4, -0.2]))


def test_unknown_mode_rejected():
    policy = _policy(4)
    with pytest.raises(ValueError):
        act(policy, np.zeros(4), "greedy")


def test_critic_gradients_match_fd():
    policy = _policy(5)
    rng = np.random.default_rng(5)
    batch = _batch(rng)
    target = rng.normal(size=16)

    def loss():
        q = policy.q1.forward(np.concatenate([batch.states, batch.actions], axis=1))[:, 0]
        return float(np.mean((q - target) ** 2))

    q = policy.q1.forward(np.concatenate([batch.states, batch.actions], axis=1), record=True)
    tape = policy.q1.backward((2.0 * (q[:, 0] - target) / 16)[:, None])
    numeric = finite_difference(loss, policy.q1.parameters(), coords=10, rng=rng)
    assert_grads_close(tape.grads, numeric)


def test_actor_gradients_match_fd():
    policy = _policy(6)
    rng = np.random.default_rng(6)
    states = rng.normal(size=(8, 4))
    eps = rng.standard_normal((8, 2))
    _, grads, _ = actor_loss_grads(policy, states, eps)
    numeric = finite_difference(
        lambda: actor_loss(policy, states, eps), policy.actor.parameters(), coords=12, rng=rng
    )
    assert_grads_close(grads, numeric)


def test_target_ema_extremes():
    rng = np.random.default_rng(7)
    for tau, expect_equal_online in ((1.0, True), (0.0, False)):
        cfg = AgentConfig(hidden=16, n_hidden=2, batch_size=16, tau_ema=tau)
        policy = _policy(7, cfg)
        before_target = [p.copy() for p in policy.q1_target.parameters()]
        sac_update(policy, _batch(rng), rng)
        if expect_equal_online:
            for p, tp in zip(policy.q1.parameters(), policy.q1_target.parameters()):
                assert np.allclose(p, tp)
        else:
            for b, tp in zip(before_target, policy.q1_target.parameters()):
                assert np.array_equal(b, tp)


def test_repeated_updates_shrink_td_error():
    policy = _policy(8)
    rng = np.random.default_rng(8)
    batch = _batch(rng)
    first = sac_update(policy, batch, rng)["critic_loss"]
    last = first
    for _ in range(499):
        last = sac_update(policy, batch, rng)["critic_loss"]
    assert last <= 0.5 * first


def test_updates_stay_finite():
    policy = _policy(9)
    rng = np.random.default_rng(9)
    for _ in range(50):
        sac_update(policy, _batch(rng), rng)
    for net in (policy.actor, policy.q1, policy.q2):
        for p in net.parameters():
            assert np.isfinite(p).all()
    assert np.isfinite(policy.log_alpha).all()


def test_intrinsic_reward_zero_for_duplicates():
    states = np.tile(np.array([1.0, 2.0]), (6, 1))
    assert intrinsic_reward(states, np.array([1.0, 2.0]), k=5) == 0.0


def test_intrinsic_reward_monotone_in_distance():
    rng = np.random.default_rng(10)
    states = rng.normal(size=(50, 3))
    near = states[0] + 0.01
    far = states[0] + 10.0
    assert intrinsic_reward(states, far, 5) > intrinsic_reward(states, near, 5)


def test_intrinsic_reward_matches_brute_force():
    rng = np.random.default_rng(11)
    states = rng.normal(size=(200, 4))
    for _ in range(100):
        q = rng.normal(size=4)
        d = np.sort([np.sqrt(((s - q) ** 2).sum()) for s in states])
        assert intrinsic_reward(states, q, 5) == pytest.approx(np.log1p(d[4]))


def test_intrinsic_reward_needs_k_states():
    with pytest.raises(NotEnoughExperience):
        intrinsic_reward(np.zeros((3, 2)), np.zeros(2), k=5)


def _pretrain_run(seed, steps=400):
    env = PointMass2D()
    cfg = AgentConfig(hidden=16, n_hidden=2, batch_size=32)
    policy = Policy(env.spec.obs_dim, env.spec.action_dim, cfg, np.random.default_rng(seed))
    buf = ReplayBuffer(steps, env.spec.obs_dim, env.spec.action_dim)
    explore_pretrain(policy, env, buf, IntrinsicConfig(pretrain_steps=steps),
                     np.random.default_rng(seed))
    return buf


def test_pretrain_fills_buffer_deterministically():
    buf_a = _pretrain_run(12)
    buf_b = _pretrain_run(12)
    assert buf_a.size == 400
    assert np.array_equal(buf_a.states, buf_b.states)
    assert np.array_equal(buf_a.learned_rewards, buf_b.learned_rewards)


def test_pretrain_spreads_more_than_random_policy():
    wins = 0
    for seed in range(10):
        buf = _pretrain_run(seed + 100, steps=600)
        spread = buf.states[: buf.size, :2].var(axis=0).mean()

        env = PointMass2D()
        rng = np.random.default_rng(seed + 100)
        state = env.reset(int(rng.integers(2**31)))
        positions = []
        for _ in range(600):
            state, _ = env.step(state, rng.uniform(-1, 1, 2))
            positions.append(state.observation[:2])
            if state.done:
                state = env.reset(int(rng.integers(2**31)))
        random_spread = np.asarray(positions).var(axis=0).mean()
        wins += spread >= random_spread
    assert wins >= 7
