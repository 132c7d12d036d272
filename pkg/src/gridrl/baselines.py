"""Per-step black-box dispatch optimisers and the shared policy evaluator.

Harris hawks optimisation and grey wolf optimisation search the action box
for the dispatch with the highest one-step reward, querying the environment
through its side-effect-free ``evaluate_action``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from gridrl.environment import GridEnv, Observation, do_nothing_policy, random_policy
from gridrl.objectives import EvaluationMetrics, StepRecord, evaluation_metrics

__all__ = [
    "SearchBudget", "SearchResult", "hho", "gwo", "metaheuristic_step", "MetaheuristicPolicy",
    "EvalResult", "evaluate_policy", "random_policy", "do_nothing_policy",
]


@dataclass(frozen=True)
class SearchBudget:
    population: int = 30
    iterations: int = 100

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")

    @property
    def evaluations(self) -> int:
        """Initial population plus one evaluation per agent per iteration."""
        return self.population * (self.iterations + 1)


@dataclass
class SearchResult:
    x: np.ndarray
    value: float
    n_evals: int


class _Counted:
    """Objective wrapper that clips to the box and enforces the evaluation budget."""

    def __init__(self, fn: Callable[[np.ndarray], float], low, high, budget: int):
        self.fn, self.low, self.high, self.budget = fn, low, high, budget
        self.n = 0
        self.best_x: np.ndarray | None = None
        self.best_f = math.inf

    @property
    def exhausted(self) -> bool:
        return self.n >= self.budget

    def __call__(self, x: np.ndarray) -> float:
        x = np.clip(x, self.low, self.high)
        self.n += 1
        f = float(self.fn(x))
        if f < self.best_f or self.best_x is None:
            self.best_f, self.best_x = f, x.copy()
        return f


def _levy(dim: int, rng: np.random.Generator, beta: float = 1.5) -> np.ndarray:
    sigma = (math.gamma(1 + beta) * math.sin(math.pi * beta / 2)
             / (math.gamma((1 + beta) / 2) * beta * 2 ** ((beta - 1) / 2))) ** (1 / beta)
    u = rng.normal(0.0, sigma, dim)
    v = rng.normal(0.0, 1.0, dim)
    return 0.01 * u / np.abs(v) ** (1 / beta)


def hho(fn: Callable[[np.ndarray], float], low, high, budget: SearchBudget,
        rng: np.random.Generator) -> SearchResult:
    """Minimise ``fn`` over the box with Harris hawks optimisation.

    Rapid-dive moves spend extra evaluations, so the run stops when the
    evaluation budget is spent and the escaping-energy schedule follows the
    fraction of the budget used.
    """
    low, high = np.asarray(low, float), np.asarray(high, float)
    dim = low.size
    obj = _Counted(fn, low, high, budget.evaluations)
    pop = rng.uniform(low, high, size=(budget.population, dim))
    fit = np.array([obj(x) for x in pop])
    while not obj.exhausted:
        rabbit = obj.best_x
        mean = pop.mean(axis=0)
        for i in range(budget.population):
            if obj.exhausted:
                break
            e = 2.0 * (2.0 * rng.random() - 1.0) * (1.0 - obj.n / obj.budget)
            x = pop[i]
            if abs(e) >= 1.0:
                if rng.random() >= 0.5:
                    other = pop[rng.integers(budget.population)]
                    new = other - rng.random() * np.abs(other - 2.0 * rng.random() * x)
                else:
                    new = (rabbit - mean) - rng.random() * (low + rng.random() * (high - low))
            else:
                jump = 2.0 * (1.0 - rng.random())
                r = rng.random()
                if r >= 0.5 and abs(e) >= 0.5:
                    new = (rabbit - x) - e * np.abs(jump * rabbit - x)
                elif r >= 0.5:
                    new = rabbit - e * np.abs(rabbit - x)
                else:
                    ref = x if abs(e) >= 0.5 else mean
                    y = np.clip(rabbit - e * np.abs(jump * rabbit - ref), low, high)
                    fy = obj(y)
                    if fy < fit[i]:
                        pop[i], fit[i] = y, fy
                        continue
                    if obj.exhausted:
                        break
                    z = np.clip(y + rng.random(dim) * _levy(dim, rng), low, high)
                    fz = obj(z)
                    if fz < fit[i]:
                        pop[i], fit[i] = z, fz
                    continue
            new = np.clip(new, low, high)
            pop[i], fit[i] = new, obj(new)
    return SearchResult(obj.best_x, obj.best_f, obj.n)


def gwo(fn: Callable[[np.ndarray], float], low, high, budget: SearchBudget,
        rng: np.random.Generator) -> SearchResult:
    """Minimise ``fn`` over the box with the grey wolf optimiser."""
    low, high = np.asarray(low, float), np.asarray(high, float)
    dim = low.size
    obj = _Counted(fn, low, high, budget.evaluations)
    pop = rng.uniform(low, high, size=(budget.population, dim))
    fit = np.array([obj(x) for x in pop])
    for it in range(budget.iterations):
        order = np.argsort(fit, kind="stable")
        leaders = pop[order[:3]].copy()
        a = 2.0 * (1.0 - it / budget.iterations)
        for i in range(budget.population):
            guided = []
            for lead in leaders:
                big_a = 2.0 * a * rng.random(dim) - a
                c = 2.0 * rng.random(dim)
                guided.append(lead - big_a * np.abs(c * lead - pop[i]))
            pop[i] = np.clip(np.mean(guided, axis=0), low, high)
            fit[i] = obj(pop[i])
    return SearchResult(obj.best_x, obj.best_f, obj.n)


_SEARCHERS = {"hho": hho, "gwo": gwo}


def metaheuristic_step(kind: str, objective: Callable[[np.ndarray], float], low, high,
                       budget: SearchBudget, rng: np.random.Generator) -> SearchResult:
    """Maximise ``objective`` (a one-step reward); the result carries the maximised value."""
    try:
        search = _SEARCHERS[kind]
    except KeyError:
        raise ValueError(f"unknown metaheuristic {kind!r}; expected one of {sorted(_SEARCHERS)}") from None
    res = search(lambda x: -objective(x), low, high, budget, rng)
    return SearchResult(res.x, -res.value, res.n_evals)


class MetaheuristicPolicy:
    """Greedy one-step optimiser used as a policy."""

    def __init__(self, kind: str, budget: SearchBudget, rng: np.random.Generator):
        if kind not in _SEARCHERS:
            raise ValueError(f"unknown metaheuristic {kind!r}")
        self.kind, self.budget, self.rng = kind, budget, rng
        self.last: SearchResult | None = None

    def __call__(self, obs: Observation, env: GridEnv) -> np.ndarray:
        self.last = metaheuristic_step(self.kind, env.evaluate_action, env.action_low, env.action_high,
                                       self.budget, self.rng)
        return self.last.x


@dataclass
class EvalResult:
    metrics: EvaluationMetrics
    step_seconds: float
    episode_returns: list[float]
    records: list[list[StepRecord]]
    infos: list[list] | None = None

    def as_dict(self) -> dict[str, float]:
        return self.metrics.as_dict()


def evaluate_policy(policy: Callable, env_factory: Callable[[], GridEnv], n_eval: int = 100,
                    t_end: int = 100, seed: int | np.random.SeedSequence = 0,
                    keep_infos: bool = False) -> EvalResult:
    """Run ``n_eval`` episodes of at most ``t_end`` steps without exploration.

    Episode ``i`` is reset from the ``i``-th child of ``seed``, so every policy
    sees the same scenarios.  Only the policy call is timed.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env = env_factory()
    records: list[list[StepRecord]] = []
    returns: list[float] = []
    infos: list[list] = []
    spent = 0.0
    n_steps = 0
    for child in ss.spawn(n_eval):
        obs = env.reset(child)
        ep: list[StepRecord] = []
        ep_infos = []
        for _ in range(t_end):
            t0 = time.perf_counter()
            action = policy(obs, env)
            spent += time.perf_counter() - t0
            n_steps += 1
            obs, reward, terminated, info = env.step(action)
            out = info.outcome
            ep.append(StepRecord(reward, out.j_vol, out.j_rer, out.n_rer_active))
            if keep_infos:
                ep_infos.append(info)
            if terminated:
                break
        records.append(ep)
        returns.append(float(sum(r.reward for r in ep)))
        infos.append(ep_infos)
    return EvalResult(evaluation_metrics(records), spent / max(n_steps, 1), returns, records,
                      infos if keep_infos else None)
