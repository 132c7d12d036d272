import numpy as np
import pytest

from gridrl.astgcn import EncoderConfig
from gridrl.autodiff import Tensor, adam_step, grad_check
from gridrl.ddpg import (
    Actor, Critic, DdpgAgent, DdpgConfig, ReplayBuffer, TrainingLog, saturation_loss, hard_update, soft_update, td_targets, train,
)
from gridrl.environment import EnvConfig, GridEnv

ENV = EnvConfig(t_recent=4, t_daily=2, t_weekly=1, max_steps=12)
ENC = EncoderConfig(kind="mg-astgcn", channels=2, cheb_order=2, n_components=1, kernel_size=3, out_dim=8)


def small_cfg(**kw):
    base = dict(hidden=(16, 16), batch_size=4, warmup=8, update_every=1, encoder=ENC)
    base.update(kw)
    return DdpgConfig(**base)


@pytest.fixture(scope="module")
def env():
    return GridEnv(ENV)


def filled(agent, env, n=16, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(64, len(agent.low), np.random.default_rng(seed))
    obs = env.reset(seed)
    agent.fit_normalization(env.history.data[: len(env.history)])
    for _ in range(n):
        u = rng.uniform(-1, 1, len(agent.low))
        nxt, r, term, _ = env.step(agent.to_env(u))
        buf.add(obs, u, r, nxt, term)
        obs = nxt
        if env.done:
            obs = env.reset(seed + 1)
    return buf


# ---------------------------------------------------------------- targets


def test_td_targets_examples():
    assert td_targets([1.0], [False], [2.0], 0.99)[0] == pytest.approx(2.98, abs=1e-15)
    assert td_targets([-10.0], [True], [123.0], 0.99)[0] == -10.0
    r = np.array([0.5, -1.0, 3.0])
    assert np.array_equal(td_targets(r, [False, True, False], [7.0, 8.0, 9.0], 0.0), r)


def test_soft_update_scalar_and_copy():
    rng = np.random.default_rng(0)
    live, tgt = Actor(3, 2, (4,), rng), Actor(3, 2, (4,), rng)
    for _, p in live.named_parameters():
        p.data[...] = 1.0
    for _, p in tgt.named_parameters():
        p.data[...] = 0.0
    soft_update(tgt, live, 0.01)
    assert all(np.all(p.data == 0.01) for _, p in tgt.named_parameters())
    soft_update(tgt, live, 1.0)
    assert all(np.array_equal(p.data, q.data) for (_, p), (_, q) in
               zip(tgt.named_parameters(), live.named_parameters()))


def test_soft_update_geometric_convergence():
    rng = np.random.default_rng(1)
    live, tgt = Actor(3, 2, (5,), rng), Actor(3, 2, (5,), rng)

    def dist():
        return np.sqrt(sum(np.sum((p.data - q.data) ** 2) for (_, p), (_, q) in
                           zip(tgt.named_parameters(), live.named_parameters())))

    d0 = dist()
    for k in range(1, 51):
        soft_update(tgt, live, 0.01)
        assert dist() == pytest.approx(0.99 ** k * d0, rel=1e-10)


def test_hard_update_copies_without_aliasing():
    rng = np.random.default_rng(2)
    live, tgt = Critic(3, 2, (4,), rng), Critic(3, 2, (4,), rng)
    hard_update(tgt, live)
    next(iter(live.parameters())).data[...] += 1.0
    assert not np.array_equal(next(iter(tgt.parameters())).data, next(iter(live.parameters())).data)


# ----------------------------------------------------------------- buffer


def test_buffer_ring_and_sampling_region():
    buf = ReplayBuffer(5, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        buf.sample_indices(1)
    for k in range(3):
        buf.add(None, np.array([k]), float(k), None, False)
    assert len(buf) == 3 and set(buf.sample_indices(500)) == {0, 1, 2}
    for k in range(3, 8):
        buf.add(None, np.array([k]), float(k), None, False)
    assert len(buf) == 5
    assert sorted(buf.rewards) == [3.0, 4.0, 5.0, 6.0, 7.0]
    with pytest.raises(ValueError):
        ReplayBuffer(0, 1, np.random.default_rng(0))


def test_buffer_uniform_sampling():
    n, draws = 50, 1_000_000
    buf = ReplayBuffer(n, 1, np.random.default_rng(7))
    for k in range(n):
        buf.add(None, np.zeros(1), 0.0, None, False)
    counts = np.bincount(buf.sample_indices(draws), minlength=n)
    p = 1.0 / n
    sigma = np.sqrt(draws * p * (1 - p))
    assert counts.sum() == draws and len(counts) == n
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


# ------------------------------------------------------------------ agent


def test_agent_shapes_and_act(env):
    agent = DdpgAgent(env, small_cfg(), np.random.default_rng(0))
    obs = env.reset(0)
    assert agent.state(obs).shape == (env.flat_dim + 8,)
    a1, a2 = agent.act(obs), agent.act(obs)
    assert np.array_equal(a1, a2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = agent.act(obs, explore=True, rng=rng)
        assert np.all(a >= env.action_low - 1e-12) and np.all(a <= env.action_high + 1e-12)
    with pytest.raises(ValueError):
        agent.act(obs, explore=True)
    assert DdpgConfig().noise_std == 0.1 and DdpgConfig().hidden == (400, 400, 400)


def test_scaling_round_trip(env):
    agent = DdpgAgent(env, small_cfg(), np.random.default_rng(0))
    u = np.random.default_rng(3).uniform(-1, 1, len(agent.low))
    assert np.allclose(agent.from_env(agent.to_env(u)), u, atol=1e-9)
    assert np.array_equal(agent.to_env(-np.ones_like(u)), agent.low)


def test_critic_loss_strictly_decreases(env):
    # small step so Adam's sign-like updates do not overshoot the tiny scaled loss
    agent = DdpgAgent(env, small_cfg(critic_lr=1e-4), np.random.default_rng(0))
    buf = filled(agent, env)
    batch = agent.make_batch(buf, np.arange(8))
    targets = agent.q_targets(batch)
    losses = []
    for _ in range(10):
        agent.critic.zero_grad()
        loss, _ = agent.critic_loss(batch, targets)
        loss.backward()
        params = dict(agent.critic.named_parameters())
        adam_step(params, {k: p.grad for k, p in params.items()}, agent.critic_opt)
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_critic_zero_error_keeps_parameters(env):
    agent = DdpgAgent(env, small_cfg(), np.random.default_rng(0))
    buf = filled(agent, env)
    batch = agent.make_batch(buf, np.arange(4))
    s, _ = agent._state(batch.x, batch.segments)
    q = agent.critic.q(s, Tensor(batch.actions)).data[:, 0]
    before = {k: v.copy() for k, v in agent.critic.state_dict().items()}
    agent.critic.zero_grad()
    loss, _ = agent.critic_loss(batch, q.copy())
    loss.backward()
    assert loss.item() == 0.0
    params = dict(agent.critic.named_parameters())
    adam_step(params, {k: p.grad for k, p in params.items()}, agent.critic_opt)
    for k, v in agent.critic.state_dict().items():
        assert np.array_equal(v, before[k])


def test_critic_gradient_matches_fd(env):
    agent = DdpgAgent(env, small_cfg(), np.random.default_rng(0))
    buf = filled(agent, env)
    batch = agent.make_batch(buf, np.arange(4))
    targets = agent.q_targets(batch)
    rep = grad_check(lambda: agent.critic_loss(batch, targets)[0], dict(agent.critic.named_parameters()),
                     max_entries=8, rng=np.random.default_rng(0))
    assert rep.worst < 1e-4


def test_actor_step_does_not_decrease_objective(env):
    agent = DdpgAgent(env, small_cfg(actor_lr=1e-5), np.random.default_rng(0))
    buf = filled(agent, env)
    batch = agent.make_batch(buf, np.arange(8))
    s, _ = agent._state(batch.x, batch.segments)
    s = Tensor(s.data)
    critic_before = {k: v.copy() for k, v in agent.critic.state_dict().items()}
    q0 = -agent.actor_loss(s).item()
    agent.update_actor_and_targets(s)
    q1 = -agent.actor_loss(s).item()
    assert q1 >= q0
    for k, v in agent.critic.state_dict().items():
        assert np.array_equal(v, critic_before[k])


def test_update_keeps_parameters_finite(env):
    agent = DdpgAgent(env, small_cfg(critic_lr=10.0, actor_lr=10.0), np.random.default_rng(0))
    buf = filled(agent, env)
    buf.rewards[:] = 1e12
    agent.update(agent.make_batch(buf, np.arange(8)))
    for mod in (agent.actor, agent.critic, agent.target_actor, agent.target_critic):
        assert all(np.all(np.isfinite(p.data)) for p in mod.parameters())


def test_state_arrays_round_trip(env):
    a = DdpgAgent(env, small_cfg(), np.random.default_rng(0))
    filled(a, env)
    b = DdpgAgent(env, small_cfg(), np.random.default_rng(99))
    b.load_arrays(a.state_arrays())
    obs = env.reset(4)
    assert np.array_equal(a.act(obs), b.act(obs))


def _train_once(seed):
    env = GridEnv(EnvConfig(t_recent=2, t_daily=1, t_weekly=1, max_steps=6))
    agent = DdpgAgent(env, small_cfg(), np.random.default_rng(seed))
    log = train(env, agent, 3, seed)
    return log, agent


def test_training_is_deterministic():
    (l1, a1), (l2, a2) = _train_once(5), _train_once(5)
    assert l1.episode_returns == l2.episode_returns
    assert l1.critic_losses == l2.critic_losses and len(l1.critic_losses) > 0
    for k, v in a1.state_arrays().items():
        assert np.array_equal(v, a2.state_arrays()[k])
    assert l1.episode_lengths == [6, 6, 6]


def test_window_means():
    log = TrainingLog(episode_returns=[float(k) for k in range(250)])
    assert log.window_means() == [49.5, 149.5, 224.5]


def test_saturation_loss_is_a_quadratic_hinge():
    pre = Tensor(np.array([[0.0, 1.9, -1.9], [3.0, -2.5, 2.0]]))
    assert saturation_loss(pre).item() == pytest.approx((1.0 + 0.25) / 2)
    inside = Tensor(np.array([[0.5, -1.0]]))
    assert saturation_loss(inside).item() == 0.0


def test_saturation_penalty_pulls_actor_out_of_saturation(env):
    agent = DdpgAgent(env, small_cfg(actor_lr=1e-3, saturation_penalty=100.0), np.random.default_rng(0))
    for p in agent.actor.net.out.parameters():
        p.data *= 50.0
    s = Tensor(np.random.default_rng(1).normal(size=(16, agent.state_dim)))
    before = saturation_loss(agent.actor.net(s)).item()
    for _ in range(20):
        agent.update_actor_and_targets(s)
    assert before > 0
    assert saturation_loss(agent.actor.net(s)).item() < before
