"""Deep deterministic policy gradient agent with a graph encoder in the critic.

The actor is updated with the deterministic policy gradient, i.e. by
ascending Q(s, pi(s)) through the critic.  The state encoder lives in the
critic and is trained only through the critic loss; the actor reads its
output as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gridrl import autodiff as ad
from gridrl.astgcn import EncoderConfig, build_encoder
from gridrl.autodiff import AdamState, Linear, Module, Tensor, adam_step, clip_grad_norm, no_grad
from gridrl.environment import GridEnv, Observation


@dataclass(frozen=True)
class DdpgConfig:
    hidden: tuple[int, ...] = (400, 400, 400)
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.01
    batch_size: int = 256
    noise_std: float = 0.1
    buffer_capacity: int = 1_000_000
    warmup: int = 1000
    update_every: int = 1
    grad_clip: float = 10.0
    reward_scale: float = 0.01
    saturation_penalty: float = 1.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)


class Mlp(Module):
    def __init__(self, n_in: int, hidden: tuple[int, ...], n_out: int, rng: np.random.Generator):
        dims = (n_in,) + tuple(hidden)
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = ad.relu(layer(x))
        return self.out(x)


class Actor(Module):
    """tanh-bounded policy; outputs live in [-1, 1] and are rescaled to the action box."""

    def __init__(self, n_in: int, n_act: int, hidden, rng):
        self.net = Mlp(n_in, hidden, n_act, rng)

    def __call__(self, s: Tensor) -> Tensor:
        return ad.tanh(self.net(s))


SATURATION_MARGIN = 2.0  # tanh'(2) ~ 0.07, beyond this the critic gradient barely moves the actor


def saturation_loss(pre: Tensor, margin: float = SATURATION_MARGIN) -> Tensor:
    """Mean over the batch of squared pre-activation excess beyond +-margin."""
    hi = ad.relu(pre - margin)
    lo = ad.relu(-pre - margin)
    return ((hi * hi).sum() + (lo * lo).sum()) / pre.data.shape[0]


class Critic(Module):
    def __init__(self, n_in: int, n_act: int, hidden, rng, encoder: Module | None = None):
        self.encoder = encoder
        self.head = Mlp(n_in + n_act, hidden, 1, rng)

    def named_parameters(self, prefix: str = ""):
        if self.encoder is not None:
            yield from self.encoder.named_parameters(prefix + "encoder.")
        yield from self.head.named_parameters(prefix + "head.")

    def q(self, s: Tensor, a: Tensor) -> Tensor:
        return self.head(ad.concat([s, a], axis=1))


def td_targets(rewards: np.ndarray, terminal: np.ndarray, q_next: np.ndarray, gamma: float) -> np.ndarray:
    """r for terminal transitions, r + gamma * Q'(s', pi'(s')) otherwise."""
    rewards = np.asarray(rewards, dtype=float)
    return rewards + gamma * (1.0 - np.asarray(terminal, dtype=float)) * np.asarray(q_next, dtype=float)


def soft_update(target: Module, live: Module, tau: float) -> None:
    """target <- tau * live + (1 - tau) * target, parameter by parameter."""
    live_params = dict(live.named_parameters())
    for name, p in target.named_parameters():
        p.data *= 1.0 - tau
        p.data += tau * live_params[name].data


def hard_update(target: Module, live: Module) -> None:
    target.load_state_dict(live.state_dict())


class ReplayBuffer:
    """Ring buffer of transitions; states are kept as (history, index) references."""

    def __init__(self, capacity: int, action_dim: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.obs: list = [None] * capacity
        self.next_obs: list = [None] * capacity
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs: Observation, action: np.ndarray, reward: float, next_obs: Observation, terminal: bool) -> None:
        i = self.pos
        self.obs[i], self.next_obs[i] = obs, next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.terminal[i] = terminal
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, size=n)


@dataclass
class Batch:
    x: np.ndarray
    segments: tuple[np.ndarray, ...] | None
    actions: np.ndarray
    rewards: np.ndarray
    x_next: np.ndarray
    segments_next: tuple[np.ndarray, ...] | None
    terminal: np.ndarray


def stack_observations(obs: list[Observation], lengths, spacings, with_segments: bool):
    x = np.stack([o.flat for o in obs])
    if not with_segments:
        return x, None
    segs = []
    for t_len, step in zip(lengths, spacings):
        offs = (t_len - np.arange(1, t_len + 1)) * step
        seg = np.stack([o.history.data[o.index - offs] for o in obs])  # (B, T, F, N)
        segs.append(np.transpose(seg, (0, 2, 3, 1)))
    return x, tuple(segs)


class DdpgAgent:
    def __init__(self, env: GridEnv, cfg: DdpgConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.lengths = env.cfg.lengths
        self.spacings = env.cfg.spacings
        self.n_features = env.n_features
        self.flat_dim = env.flat_dim
        self.low, self.high = env.action_low.copy(), env.action_high.copy()
        n_act = len(self.low)
        self.encoder = build_encoder(cfg.encoder, env.graph.laplacian_scaled, env.n_features, self.lengths, rng)
        self.target_encoder = build_encoder(cfg.encoder, env.graph.laplacian_scaled, env.n_features,
                                            self.lengths, np.random.default_rng(0))
        d_y = 0 if self.encoder is None else self.encoder.out_dim
        n_in = self.flat_dim + d_y
        self.actor = Actor(n_in, n_act, cfg.hidden, rng)
        self.critic = Critic(n_in, n_act, cfg.hidden, rng, self.encoder)
        self.target_actor = Actor(n_in, n_act, cfg.hidden, np.random.default_rng(0))
        self.target_critic = Critic(n_in, n_act, cfg.hidden, np.random.default_rng(0), self.target_encoder)
        hard_update(self.target_actor, self.actor)
        hard_update(self.target_critic, self.critic)
        self.actor_opt = AdamState(lr=cfg.actor_lr)
        self.critic_opt = AdamState(lr=cfg.critic_lr)
        self.feature_mean = np.zeros(self.n_features)
        self.feature_std = np.ones(self.n_features)
        self.state_dim = n_in
        self.n_updates = 0

    # -- normalisation
    def fit_normalization(self, snapshots: np.ndarray) -> None:
        """Per-feature statistics over a stack of (F, N) snapshots."""
        snaps = np.asarray(snapshots, dtype=float)
        mean = snaps.mean(axis=(0, 2))
        std = snaps.std(axis=(0, 2))
        std = np.where(std > 1e-8, std, 1.0)
        self.feature_mean, self.feature_std = mean, std
        for enc in (self.encoder, self.target_encoder):
            if enc is not None:
                enc.set_normalization(mean, std)

    def _norm_flat(self, x: np.ndarray) -> np.ndarray:
        n_nodes = self.flat_dim // self.n_features
        return (x - np.tile(self.feature_mean, n_nodes)) / np.tile(self.feature_std, n_nodes)

    def _state(self, x: np.ndarray, segments, target: bool = False) -> tuple[Tensor, Tensor | None]:
        xn = Tensor(self._norm_flat(x))
        enc = self.target_encoder if target else self.encoder
        if enc is None:
            return xn, None
        y = enc(segments)
        return ad.concat([xn, y], axis=1), y

    # -- scaling between the actor's [-1, 1] and the action box
    def to_env(self, u: np.ndarray) -> np.ndarray:
        return self.low + 0.5 * (np.asarray(u) + 1.0) * (self.high - self.low)

    def from_env(self, a: np.ndarray) -> np.ndarray:
        span = np.where(self.high > self.low, self.high - self.low, 1.0)
        return np.clip(2.0 * (np.asarray(a) - self.low) / span - 1.0, -1.0, 1.0)

    # -- acting
    def state(self, obs: Observation) -> np.ndarray:
        """MDP state vector: flattened raw node features followed by the encoder output."""
        x, segs = stack_observations([obs], self.lengths, self.spacings, self.encoder is not None)
        if self.encoder is None:
            return x[0].copy()
        with no_grad():
            y = self.encoder(segs).data[0]
        return np.concatenate([x[0], y])

    def act_unit(self, obs: Observation, explore: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        x, segs = stack_observations([obs], self.lengths, self.spacings, self.encoder is not None)
        with no_grad():
            s, _ = self._state(x, segs)
            u = self.actor(s).data[0].copy()
        if explore and self.cfg.noise_std > 0:
            if rng is None:
                raise ValueError("exploration needs a random generator")
            u = np.clip(u + rng.normal(0.0, self.cfg.noise_std, size=u.shape), -1.0, 1.0)
        return u

    def act(self, obs: Observation, explore: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        return self.to_env(self.act_unit(obs, explore, rng))

    def policy(self, obs: Observation, env: GridEnv | None = None) -> np.ndarray:
        return self.act(obs, explore=False)

    __call__ = policy

    # -- learning
    def make_batch(self, buffer: ReplayBuffer, idx: np.ndarray) -> Batch:
        with_seg = self.encoder is not None
        x, seg = stack_observations([buffer.obs[i] for i in idx], self.lengths, self.spacings, with_seg)
        xn, segn = stack_observations([buffer.next_obs[i] for i in idx], self.lengths, self.spacings, with_seg)
        return Batch(x, seg, buffer.actions[idx].copy(), buffer.rewards[idx].copy(), xn, segn,
                     buffer.terminal[idx].copy())

    def q_targets(self, batch: Batch) -> np.ndarray:
        with no_grad():
            s_next, _ = self._state(batch.x_next, batch.segments_next, target=True)
            a_next = self.target_actor(s_next)
            q_next = self.target_critic.q(s_next, a_next).data[:, 0]
        return td_targets(self.cfg.reward_scale * batch.rewards, batch.terminal, q_next, self.cfg.gamma)

    def critic_loss(self, batch: Batch, targets: np.ndarray) -> tuple[Tensor, Tensor]:
        s, _ = self._state(batch.x, batch.segments)
        q = self.critic.q(s, Tensor(batch.actions))
        err = q + Tensor(-targets[:, None])
        return (err * err).mean(), s

    def actor_loss(self, s_const: Tensor) -> Tensor:
        pre = self.actor.net(s_const)
        loss = -self.critic.q(s_const, ad.tanh(pre)).mean()
        if self.cfg.saturation_penalty > 0:
            loss = loss + self.cfg.saturation_penalty * saturation_loss(pre)
        return loss

    def update_critic(self, batch: Batch) -> tuple[float, Tensor]:
        targets = self.q_targets(batch)
        self.critic.zero_grad()
        loss, s = self.critic_loss(batch, targets)
        loss.backward()
        params = dict(self.critic.named_parameters())
        clip_grad_norm(params.values(), self.cfg.grad_clip)
        adam_step(params, {k: p.grad for k, p in params.items()}, self.critic_opt)
        return loss.item(), Tensor(s.data)

    def update_actor_and_targets(self, s_const: Tensor) -> float:
        self.actor.zero_grad()
        loss = self.actor_loss(s_const)
        loss.backward()
        self.critic.zero_grad()
        params = dict(self.actor.named_parameters())
        clip_grad_norm(params.values(), self.cfg.grad_clip)
        adam_step(params, {k: p.grad for k, p in params.items()}, self.actor_opt)
        soft_update(self.target_actor, self.actor, self.cfg.tau)
        soft_update(self.target_critic, self.critic, self.cfg.tau)
        return -loss.item()

    def update(self, batch: Batch) -> tuple[float, float]:
        c_loss, s = self.update_critic(batch)
        q_pi = self.update_actor_and_targets(s)
        self.n_updates += 1
        return c_loss, q_pi

    # -- persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"feature_mean": self.feature_mean, "feature_std": self.feature_std}
        for prefix, mod in (("actor", self.actor), ("critic", self.critic),
                            ("target_actor", self.target_actor), ("target_critic", self.target_critic)):
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.fit_normalization_from(arrays["feature_mean"], arrays["feature_std"])
        for prefix, mod in (("actor", self.actor), ("critic", self.critic),
                            ("target_actor", self.target_actor), ("target_critic", self.target_critic)):
            mod.load_state_dict({k[len(prefix) + 1:]: v for k, v in arrays.items()
                                 if k.startswith(prefix + ".")})

    def fit_normalization_from(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.feature_mean, self.feature_std = np.array(mean, dtype=float), np.array(std, dtype=float)
        for enc in (self.encoder, self.target_encoder):
            if enc is not None:
                enc.set_normalization(self.feature_mean, self.feature_std)


@dataclass
class TrainingLog:
    episode_returns: list[float] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)
    critic_losses: list[float] = field(default_factory=list)

    def window_means(self, window: int = 100) -> list[float]:
        r = self.episode_returns
        return [float(np.mean(r[i:i + window])) for i in range(0, len(r), window)]


def train(env: GridEnv, agent: DdpgAgent, n_episodes: int, seed: np.random.SeedSequence | int,
          on_step: Callable | None = None, on_episode: Callable | None = None) -> TrainingLog:
    """Episodes of noisy acting, storing transitions and learning from replayed batches.

    ``seed`` spawns four independent streams: episode resets, exploration
    noise, replay sampling, and spare.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    reset_ss, noise_ss, replay_ss, _ = ss.spawn(4)
    noise_rng = np.random.default_rng(noise_ss)
    cfg = agent.cfg
    buffer = ReplayBuffer(cfg.buffer_capacity, len(agent.low), np.random.default_rng(replay_ss))
    log = TrainingLog()
    total_steps = 0
    episode_seeds = reset_ss.spawn(n_episodes)
    for ep in range(n_episodes):
        obs = env.reset(episode_seeds[ep])
        if ep == 0:
            agent.fit_normalization(env.history.data[: len(env.history)])
        ret = 0.0
        steps = 0
        while True:
            u = agent.act_unit(obs, explore=True, rng=noise_rng)
            next_obs, reward, terminated, info = env.step(agent.to_env(u))
            buffer.add(obs, u, reward, next_obs, terminated)
            total_steps += 1
            steps += 1
            ret += reward
            if len(buffer) >= max(cfg.warmup, cfg.batch_size) and total_steps % cfg.update_every == 0:
                batch = agent.make_batch(buffer, buffer.sample_indices(cfg.batch_size))
                c_loss, _ = agent.update(batch)
                log.critic_losses.append(c_loss)
            if on_step is not None:
                on_step(ep, steps, info, u)
            obs = next_obs
            if env.done:
                break
        log.episode_returns.append(ret)
        log.episode_lengths.append(steps)
        if on_episode is not None:
            on_episode(ep, ret, steps)
    return log
