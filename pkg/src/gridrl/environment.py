"""The distribution-grid dispatch MDP.

Each step is one hour.  The agent sets (p, v) for every generator; the action
is projected onto ramp and unit-commitment limits, the AC power flow is
solved under freshly sampled renewable availability and loads, and the reward
follows the weighted objective with constraint penalties.  Node-feature
snapshots are kept in a per-episode history from which recent, daily and
weekly graph segments are cut.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from gridrl.autodiff import no_grad
from gridrl.grid_model import NetworkCase, build_matrices, load_case
from gridrl.objectives import (
    ObjectiveWeights,
    StepOutcome,
    accommodation_ratios,
    step_reward,
    voltage_fluctuation,
)
from gridrl.power_flow import (
    ConstraintReport,
    DispatchAction,
    PowerFlowSolution,
    check_constraints,
    solve_power_flow,
)
from gridrl.stochastic_gen import AvailabilitySample, GenerationCosts, generation_costs, sample_availability

SHUTDOWN_FRACTION = 0.5  # thermal p below this fraction of p_min requests a shutdown


@dataclass(frozen=True)
class EnvConfig:
    case: str = "ieee33"
    t_recent: int = 32
    t_daily: int = 16
    t_weekly: int = 4
    steps_per_day: int = 24
    max_steps: int = 128
    penalty: float = -10.0
    w_vol: float = 1.0
    w_rer: float = 1.0
    w_gen: float = 0.01
    control_mode: str = "pv"  # pv: (p, v) per generator; pq: (p, q)
    warmup: str = "replay"  # replay | zeros
    min_up: int = 4
    min_down: int = 4
    load_noise: float = 0.05
    load_peak_hour: int = 19
    load_swing: float = 0.2

    @property
    def weights(self) -> ObjectiveWeights:
        return ObjectiveWeights(self.w_vol, self.w_rer, self.w_gen)

    @property
    def lengths(self) -> tuple[int, int, int]:
        return (self.t_recent, self.t_daily, self.t_weekly)

    @property
    def spacings(self) -> tuple[int, int, int]:
        return (1, self.steps_per_day, 7 * self.steps_per_day)

    @property
    def warmup_steps(self) -> int:
        return 7 * self.t_weekly * self.steps_per_day


def load_multiplier(hour: int, cfg: EnvConfig) -> float:
    """Diurnal system-load level in [1 - 2*swing, 1], peaking at ``load_peak_hour``."""
    phase = 2.0 * math.pi * ((hour - cfg.load_peak_hour) % 24) / 24.0
    return 1.0 - cfg.load_swing * (1.0 - math.cos(phase))


# ------------------------------------------------------------------ history


@dataclass(frozen=True)
class SegmentSet:
    recent: np.ndarray  # (F, N, T_r)
    daily: np.ndarray
    weekly: np.ndarray

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.recent, self.daily, self.weekly)


class EpisodeHistory:
    """Append-only store of node-feature snapshots, each (F, N)."""

    def __init__(self, n_features: int, n_nodes: int, capacity: int):
        self.data = np.zeros((max(capacity, 1), n_features, n_nodes))
        self.length = 0

    def append(self, snapshot: np.ndarray) -> int:
        if self.length == self.data.shape[0]:
            grown = np.zeros((2 * self.length,) + self.data.shape[1:])
            grown[: self.length] = self.data
            self.data = grown
        self.data[self.length] = snapshot
        self.length += 1
        return self.length - 1

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, idx: int) -> np.ndarray:
        if not 0 <= idx < self.length:
            raise IndexError(idx)
        return self.data[idx]

    def segment_indices(self, index: int, lengths, spacings) -> list[np.ndarray]:
        out = []
        for t_len, step in zip(lengths, spacings):
            idx = index - (t_len - np.arange(1, t_len + 1)) * step
            if idx[0] < 0:
                raise ValueError(f"history too short for a segment of {t_len} x {step} ending at {index}")
            out.append(idx)
        return out

    def segments(self, index: int, lengths, spacings) -> SegmentSet:
        parts = [np.transpose(self.data[idx], (1, 2, 0)) for idx in self.segment_indices(index, lengths, spacings)]
        return SegmentSet(*parts)


@dataclass(frozen=True)
class Observation:
    """A pointer to one snapshot of an episode history."""

    history: EpisodeHistory
    index: int

    @property
    def features(self) -> np.ndarray:
        return self.history[self.index]

    @property
    def flat(self) -> np.ndarray:
        """Node-major flattening, length N * F."""
        return np.ascontiguousarray(self.features.T).ravel()


# --------------------------------------------------------- unit commitment


@dataclass
class UnitCommitment:
    """Thermal unit state, indexed in thermal order."""

    online: np.ndarray
    last_p: np.ndarray
    steps_since_start: np.ndarray
    steps_since_stop: np.ndarray

    def copy(self) -> "UnitCommitment":
        return UnitCommitment(self.online.copy(), self.last_p.copy(),
                              self.steps_since_start.copy(), self.steps_since_stop.copy())

    def advance(self, online: np.ndarray, p: np.ndarray) -> "UnitCommitment":
        online = np.asarray(online, dtype=bool)
        toggled = online != self.online
        start = np.where(toggled & online, 0, self.steps_since_start)
        stop = np.where(toggled & ~online, 0, self.steps_since_stop)
        start = start + online
        stop = stop + ~online
        return UnitCommitment(online.copy(), np.where(online, p, 0.0), start.astype(int), stop.astype(int))


def initial_commitment(case: NetworkCase, min_up: int = 4) -> UnitCommitment:
    th = [case.generators[i] for i in case.gen_indices("thermal")]
    n = len(th)
    return UnitCommitment(np.ones(n, dtype=bool), np.array([g.p_min for g in th]),
                          np.full(n, min_up, dtype=int), np.zeros(n, dtype=int))


def action_bounds(case: NetworkCase, mode: str = "pv") -> tuple[np.ndarray, np.ndarray]:
    """Box of the raw action vector, interleaved (p, v) or (p, q) per generator."""
    lo, hi = [], []
    for g in case.generators:
        p_hi = g.p_max if g.kind == "thermal" else g.rated_p
        if mode == "pv":
            lo += [0.0, g.v_min]
            hi += [p_hi, g.v_max]
        else:
            lo += [0.0, g.q_min]
            hi += [p_hi, g.q_max]
    return np.array(lo), np.array(hi)


def project_action(raw: DispatchAction, uc: UnitCommitment, case: NetworkCase,
                   p_bar: np.ndarray | None = None, faulted: np.ndarray | None = None,
                   min_up: int = 4, min_down: int = 4) -> DispatchAction:
    """Map a raw dispatch onto ramp, box and start/stop rules.

    Online thermal units move at most ``ramp_fraction * rated`` per step and
    stay in [p_min, p_max]; a request below half of p_min shuts a unit down,
    which is only honoured from p_min after ``min_up`` steps online.  Offline
    units restart at p_min once ``min_down`` steps have passed.  Renewable p
    is clipped to [0, p_bar]; second components are clipped to their box.
    """
    n = len(case.generators)
    faulted = np.zeros(n, dtype=bool) if faulted is None else np.asarray(faulted, dtype=bool)
    p = np.array(raw.p, dtype=float)
    second = np.array(raw.v, dtype=float)
    online = np.ones(n, dtype=bool)
    th_idx = case.gen_indices("thermal")
    for j, i in enumerate(th_idx):
        g = case.generators[i]
        if faulted[i]:
            online[i], p[i] = False, 0.0
            continue
        wants_off = p[i] < SHUTDOWN_FRACTION * g.p_min
        if uc.online[j]:
            at_floor = abs(uc.last_p[j] - g.p_min) <= 1e-9
            if wants_off and at_floor and uc.steps_since_start[j] >= min_up:
                online[i], p[i] = False, 0.0
                continue
            step = g.ramp_fraction * g.rated_p
            lo = max(g.p_min, uc.last_p[j] - step)
            hi = min(g.p_max, uc.last_p[j] + step)
            p[i] = min(max(p[i], lo), hi)
        elif not wants_off and uc.steps_since_stop[j] >= min_down:
            p[i] = g.p_min
        else:
            online[i], p[i] = False, 0.0
    for i, g in enumerate(case.generators):
        if g.kind == "thermal":
            pass
        elif faulted[i]:
            online[i], p[i] = False, 0.0
        else:
            cap = g.rated_p if p_bar is None else min(g.rated_p, p_bar[i])
            p[i] = min(max(p[i], 0.0), cap)
        if raw.mode == "pv":
            second[i] = min(max(second[i], g.v_min), g.v_max)
        else:
            second[i] = min(max(second[i], g.q_min), g.q_max)
    return DispatchAction(p, second, online, raw.mode)


# ------------------------------------------------------------------ stepping


@dataclass
class StepInfo:
    hour: int
    dispatch: DispatchAction
    sample: AvailabilitySample
    load_p: np.ndarray
    load_q: np.ndarray
    solution: PowerFlowSolution
    violations: ConstraintReport
    costs: GenerationCosts | None
    outcome: StepOutcome
    truncated: bool = False

    @property
    def reward(self) -> float:
        return self.outcome.reward


@dataclass
class _Pending:
    hour: int
    sample: AvailabilitySample
    load_p: np.ndarray
    load_q: np.ndarray


class Policy(Protocol):
    def __call__(self, obs: Observation, env: "GridEnv") -> np.ndarray: ...


def load_voltages(sol: PowerFlowSolution, case: NetworkCase) -> np.ndarray:
    """Voltage magnitudes of the load buses (every bus except the slack)."""
    return np.delete(sol.v_mag, case.slack)


def evaluate_step(case: NetworkCase, cfg: EnvConfig, dispatch: DispatchAction, pending: _Pending) -> StepInfo:
    """Solve, audit and score one projected dispatch; pure."""
    sol = solve_power_flow(case, dispatch, pending.sample, load_p=pending.load_p, load_q=pending.load_q)
    rep = check_constraints(sol, case, dispatch)
    sample = pending.sample
    rer = sample.rer_mask
    if not sol.converged:
        reward, terminated, n_pen = step_reward(None, np.zeros(0), np.zeros(0, bool), np.zeros(0),
                                                np.zeros(0), cfg.weights, rep, penalty=cfg.penalty)
        outcome = StepOutcome(math.nan, math.nan, math.nan, reward, True, terminated, n_pen, 0, False)
        return StepInfo(pending.hour, dispatch, sample, pending.load_p, pending.load_q, sol, rep, None, outcome)
    costs = generation_costs(sol.gen_p, dispatch.online, sample, case)
    ratio, active = accommodation_ratios(sol.gen_p[rer], sample.p_bar[rer])
    rer_costs = np.concatenate([costs.wind, costs.solar])
    v_load = load_voltages(sol, case)
    reward, terminated, n_pen = step_reward(v_load, ratio, active, costs.thermal, rer_costs,
                                            cfg.weights, rep, penalty=cfg.penalty)
    outcome = StepOutcome(
        j_vol=voltage_fluctuation(v_load),
        j_rer=float(ratio.sum()),
        j_gen=costs.total,
        reward=reward,
        penalty_applied=n_pen > 0,
        terminated=terminated,
        n_penalties=n_pen,
        n_rer_active=int(active.sum()),
        converged=True,
    )
    return StepInfo(pending.hour, dispatch, sample, pending.load_p, pending.load_q, sol, rep, costs, outcome)


def node_features(sol: PowerFlowSolution, case: NetworkCase, incident, n_features: int) -> np.ndarray:
    """(F, N) snapshot: v, angle, load p, load q, then (p, q) leaving the node into each incident branch."""
    out = np.zeros((n_features, case.n_bus))
    out[0] = sol.v_mag
    out[1] = sol.v_ang
    out[2] = sol.load_p
    out[3] = sol.load_q
    f = case.branch_from
    for bus, brs in enumerate(incident):
        for slot, k in enumerate(brs):
            if f[k] == bus:
                out[4 + 2 * slot, bus] = sol.branch_p[k]
                out[5 + 2 * slot, bus] = sol.branch_q[k]
            else:
                out[4 + 2 * slot, bus] = sol.branch_p_to[k]
                out[5 + 2 * slot, bus] = sol.branch_q_to[k]
    return out


class GridEnv:
    """Single-owner mutable environment; independent instances share nothing."""

    def __init__(self, cfg: EnvConfig = EnvConfig(), case: NetworkCase | None = None, encoder=None):
        self.cfg = cfg
        self.case = case if case is not None else load_case(cfg.case)
        self.encoder = encoder
        self.n_gen = len(self.case.generators)
        self.n_nodes = self.case.n_bus
        self.incident = self.case.incident_branches
        self.n_features = 4 + 2 * max(len(b) for b in self.incident)
        self.graph = build_matrices(self.case)
        self.action_low, self.action_high = action_bounds(self.case, cfg.control_mode)
        self.thermal = np.array(self.case.gen_indices("thermal"), dtype=int)
        self._rng: np.random.Generator | None = None
        self.history: EpisodeHistory | None = None

    # -- shapes
    @property
    def action_dim(self) -> int:
        return 2 * self.n_gen

    @property
    def flat_dim(self) -> int:
        return self.n_nodes * self.n_features

    @property
    def state_dim(self) -> int:
        return self.flat_dim + (self.encoder.out_dim if self.encoder is not None else 0)

    # -- sampling
    def _draw(self, hour: int) -> _Pending:
        sample = sample_availability(self.case, hour, self._rng)
        level = load_multiplier(hour, self.cfg)
        noise = 1.0 + self.cfg.load_noise * self._rng.standard_normal(self.n_nodes)
        scale = level * np.clip(noise, 0.0, None)
        return _Pending(hour, sample, self.case.load_p * scale, self.case.load_q * scale)

    def baseline_dispatch(self, p_bar: np.ndarray | None = None) -> DispatchAction:
        """Do-nothing dispatch: thermal at p_min, renewables uncapped, mid-band voltages."""
        p = np.array([g.p_min if g.kind == "thermal" else g.rated_p for g in self.case.generators])
        if p_bar is not None:
            p = np.where([g.kind == "thermal" for g in self.case.generators], p, np.minimum(p, p_bar))
        if self.cfg.control_mode == "pv":
            second = np.array([0.5 * (g.v_min + g.v_max) for g in self.case.generators])
        else:
            second = np.zeros(self.n_gen)
        return DispatchAction(p, second, mode=self.cfg.control_mode)

    def _snapshot(self, info: StepInfo, fallback: np.ndarray | None) -> np.ndarray:
        if info.solution.converged:
            return node_features(info.solution, self.case, self.incident, self.n_features)
        return fallback if fallback is not None else np.zeros((self.n_features, self.n_nodes))

    # -- episode control
    def reset(self, seed: int | np.random.SeedSequence | None = None, start_hour: int | None = None) -> Observation:
        self._rng = np.random.default_rng(seed)
        hour = int(self._rng.integers(24)) if start_hour is None else int(start_hour) % 24
        w = self.cfg.warmup_steps
        self.history = EpisodeHistory(self.n_features, self.n_nodes, w + min(self.cfg.max_steps, 1024) + 1)
        base = self.baseline_dispatch()
        n_replay = w if self.cfg.warmup == "replay" else 1
        if self.cfg.warmup != "replay":
            for _ in range(w - 1):
                self.history.append(np.zeros((self.n_features, self.n_nodes)))
        prev = None
        for k in range(n_replay):
            h = (hour - n_replay + k) % 24
            pend = self._draw(h)
            sol = solve_power_flow(self.case, base, pend.sample, load_p=pend.load_p, load_q=pend.load_q)
            if sol.converged:
                prev = node_features(sol, self.case, self.incident, self.n_features)
            self.history.append(prev if prev is not None else np.zeros((self.n_features, self.n_nodes)))
        self.hour = hour
        self.t = 0
        self.uc = initial_commitment(self.case, self.cfg.min_up)
        self.faulted = np.zeros(self.n_gen, dtype=bool)
        self.last_dispatch = base
        self.last_info: StepInfo | None = None
        self.done = False
        self._pending = self._draw(self.hour)
        return self.observation()

    def observation(self) -> Observation:
        return Observation(self.history, len(self.history) - 1)

    def build_segments(self, obs: Observation | None = None) -> SegmentSet:
        obs = obs or self.observation()
        return obs.history.segments(obs.index, self.cfg.lengths, self.cfg.spacings)

    def state_vector(self, obs: Observation | None = None) -> np.ndarray:
        """Flattened node features followed by the encoder output, if any."""
        obs = obs or self.observation()
        if self.encoder is None:
            return obs.flat.copy()
        with no_grad():
            y = self.encoder(self.build_segments(obs).as_tuple()).data[0]
        return np.concatenate([obs.flat, y])

    def project(self, action) -> DispatchAction:
        raw = action if isinstance(action, DispatchAction) else DispatchAction.from_vector(
            np.clip(action, self.action_low, self.action_high), mode=self.cfg.control_mode)
        return project_action(raw, self.uc, self.case, self._pending.sample.p_bar, self.faulted,
                              self.cfg.min_up, self.cfg.min_down)

    def evaluate_action(self, action) -> float:
        """Reward the action would earn at the upcoming step; no state is changed."""
        return evaluate_step(self.case, self.cfg, self.project(action), self._pending).reward

    def step(self, action) -> tuple[Observation, float, bool, StepInfo]:
        if self._rng is None:
            raise RuntimeError("step() before reset()")
        dispatch = self.project(action)
        info = evaluate_step(self.case, self.cfg, dispatch, self._pending)
        fallback = self.history[len(self.history) - 1]
        self.history.append(self._snapshot(info, fallback))
        th_p = dispatch.p[self.thermal]
        self.uc = self.uc.advance(dispatch.online[self.thermal], th_p)
        self.last_dispatch = dispatch
        self.t += 1
        self.hour = (self.hour + 1) % 24
        info.truncated = self.t >= self.cfg.max_steps and not info.outcome.terminated
        self.last_info = info
        self.done = info.outcome.terminated or info.truncated
        self._pending = self._draw(self.hour)
        return self.observation(), info.reward, info.outcome.terminated, info

    # -- faults
    def inject_fault(self, gen_ids) -> PowerFlowSolution | None:
        """Force generators offline for the rest of the episode; returns the post-fault flow."""
        ids = [int(i) for i in gen_ids]
        if not ids:
            return None
        if any(i < 0 or i >= self.n_gen for i in ids):
            raise IndexError(f"generator ids {ids} out of range")
        self.faulted[ids] = True
        d = self.last_dispatch.copy()
        d.online[ids] = False
        d.p[ids] = 0.0
        self.last_dispatch = d
        th = {int(g): j for j, g in enumerate(self.thermal)}
        for i in ids:
            if i in th:
                self.uc.online[th[i]] = False
                self.uc.last_p[th[i]] = 0.0
        info = self.last_info
        if info is None:
            return solve_power_flow(self.case, d, self._pending.sample,
                                    load_p=self._pending.load_p, load_q=self._pending.load_q)
        return solve_power_flow(self.case, d, info.sample, load_p=info.load_p, load_q=info.load_q)

    def voltages_ok(self, sol: PowerFlowSolution) -> bool:
        if not sol.converged:
            return False
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.case.slack] = False
        v = sol.v_mag[mask]
        return bool(np.all(v >= self.case.bus_v_min[mask] - 1e-9) and np.all(v <= self.case.bus_v_max[mask] + 1e-9))

    def measure_recovery(self, policy: Policy, gen_ids, horizon: int = 48) -> tuple[int, bool]:
        """Steps until all load voltages are back in bounds after faulting ``gen_ids``.

        Returns ``(steps, recovered)``; ``steps`` is capped at ``horizon``.
        Faulting nothing is a no-op with zero response.
        """
        post = self.inject_fault(gen_ids)
        if post is None or self.voltages_ok(post):
            return 0, True
        obs = self.observation()
        for k in range(1, horizon + 1):
            obs, _, terminated, info = self.step(policy(obs, self))
            if self.voltages_ok(info.solution):
                return k, True
            if terminated:
                break
        return horizon, False


def make_env(cfg: EnvConfig | None = None, encoder=None) -> GridEnv:
    return GridEnv(cfg or EnvConfig(), encoder=encoder)


def do_nothing_policy(obs: Observation, env: GridEnv) -> np.ndarray:
    return env.baseline_dispatch().to_vector()


def random_policy(rng: np.random.Generator) -> Callable[[Observation, GridEnv], np.ndarray]:
    def policy(obs: Observation, env: GridEnv) -> np.ndarray:
        return rng.uniform(env.action_low, env.action_high)

    return policy
