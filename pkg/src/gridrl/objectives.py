"""Objective metrics, the per-step reward and episode evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from gridrl.power_flow import ConstraintReport, PowerFlowError, PowerFlowSolution

PENALIZED_KINDS = ("load_voltage", "gen_q", "branch_flow")


@dataclass(frozen=True)
class ObjectiveWeights:
    w_vol: float = 1.0
    w_rer: float = 1.0
    w_gen: float = 0.01

    def __post_init__(self):
        if min(self.w_vol, self.w_rer, self.w_gen) < 0:
            raise ValueError("objective weights must be nonnegative")

    def scaled(self, lam: float) -> "ObjectiveWeights":
        return ObjectiveWeights(lam * self.w_vol, lam * self.w_rer, lam * self.w_gen)


@dataclass
class StepOutcome:
    j_vol: float
    j_rer: float
    j_gen: float
    reward: float
    penalty_applied: bool
    terminated: bool
    n_penalties: int = 0
    n_rer_active: int = 0
    converged: bool = True


def voltage_fluctuation(v_mag: np.ndarray | PowerFlowSolution) -> float:
    """L2 distance of the bus voltage magnitudes from nominal."""
    if isinstance(v_mag, PowerFlowSolution):
        if not v_mag.converged:
            raise PowerFlowError("voltage metric of an unconverged power flow")
        v_mag = v_mag.v_mag
    return float(np.sqrt(np.sum((1.0 - np.asarray(v_mag)) ** 2)))


def accommodation_ratios(p_act: np.ndarray, p_bar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dispatched-over-available ratio per renewable; entries with nothing available are masked out."""
    p_act = np.asarray(p_act, dtype=float)
    p_bar = np.asarray(p_bar, dtype=float)
    if np.any(p_act > p_bar + 1e-12):
        raise ValueError("actual renewable output exceeds availability")
    active = p_bar > 0
    ratio = np.zeros_like(p_bar)
    ratio[active] = p_act[active] / p_bar[active]
    return ratio, active


def renewable_accommodation(p_act: np.ndarray, p_bar: np.ndarray) -> float:
    ratio, _ = accommodation_ratios(p_act, p_bar)
    return float(ratio.sum())


def reward_terms(v_mag: np.ndarray, ratio: np.ndarray, active: np.ndarray,
                 thermal_costs: np.ndarray, rer_costs: np.ndarray) -> tuple[float, float, float]:
    """Unweighted voltage, accommodation and cost terms of the reward."""
    vol = float(np.sqrt(np.sum(np.exp(-((1.0 - np.asarray(v_mag)) ** 2)))))
    rer = float(np.sum(np.exp(ratio[active])))
    gen = float(np.sum(np.exp(-np.asarray(thermal_costs))) + np.sum(np.exp(-np.asarray(rer_costs))))
    return vol, rer, gen


def step_reward(
    v_mag: np.ndarray | None,
    ratio: np.ndarray,
    active: np.ndarray,
    thermal_costs: np.ndarray,
    rer_costs: np.ndarray,
    weights: ObjectiveWeights,
    violations: ConstraintReport,
    balance_ok: bool = True,
    penalty: float = -10.0,
) -> tuple[float, bool, int]:
    """Weighted reward plus one ``penalty`` per penalised violation.

    Returns ``(reward, terminated, n_penalties)``.  An unsatisfiable power
    balance yields the penalty alone and terminates the episode.
    """
    if not balance_ok or violations.count("balance"):
        return float(penalty), True, 1
    vol, rer, gen = reward_terms(v_mag, ratio, active, thermal_costs, rer_costs)
    n_pen = violations.count(*PENALIZED_KINDS)
    reward = weights.w_vol * vol + weights.w_rer * rer + weights.w_gen * gen + n_pen * penalty
    return float(reward), False, n_pen


@dataclass(frozen=True)
class StepRecord:
    reward: float
    j_vol: float
    j_rer: float
    n_rer_active: int


@dataclass(frozen=True)
class EvaluationMetrics:
    score: float
    alpha_vol: float
    alpha_rer: float

    def as_dict(self) -> dict[str, float]:
        return {"SCORE": self.score, "alpha_vol": self.alpha_vol, "alpha_rer": self.alpha_rer}


def evaluation_metrics(episodes: Sequence[Iterable[StepRecord]]) -> EvaluationMetrics:
    """SCORE is the mean episode return; both rates are step means in percent.

    The accommodation rate of a step divides by the renewables that had
    nonzero availability; steps without any are skipped, as are steps whose
    power flow did not solve when averaging the voltage deviation.
    """
    episodes = [list(ep) for ep in episodes]
    if not episodes or not any(episodes):
        raise ValueError("no episode logs to evaluate")
    score = float(np.mean([sum(r.reward for r in ep) for ep in episodes]))
    steps = [r for ep in episodes for r in ep]
    vols = [r.j_vol for r in steps if np.isfinite(r.j_vol)]  # unsolved steps carry no voltage
    alpha_vol = 100.0 * float(np.mean(vols)) if vols else float("nan")
    rates = [r.j_rer / r.n_rer_active for r in steps if r.n_rer_active > 0]
    alpha_rer = 100.0 * float(np.mean(rates)) if rates else 0.0
    return EvaluationMetrics(score, alpha_vol, alpha_rer)
